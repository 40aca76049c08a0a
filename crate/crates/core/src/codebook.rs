//! Toy visual tokenizer: a k-means codebook over flattened patches.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::input::image::PatchGrid;

/// `K × D` centroids; patch `p` is labeled with its nearest centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    /// FNV-1a digest of the training patches.
    pub trained_on: u64,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>, trained_on: u64) -> Result<Self> {
        if centroids.len() != k * dim {
            return Err(Error::dim("Codebook", &[k, dim], &[centroids.len()]));
        }
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("codebook has non-finite centroids".into()));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            trained_on,
        })
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, p: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.k {
            let d = sq_dist(p, self.centroid(i));
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

pub fn fingerprint(patches: &[f32], dim: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(dim as u64).to_le_bytes());
    for p in patches {
        eat(&p.to_le_bytes());
    }
    h
}

/// Result of [`train_codebook`]: the codebook and the mean squared
/// quantization error after seeding and after each Lloyd iteration.
#[derive(Clone, Debug)]
pub struct CodebookFit {
    pub codebook: Codebook,
    pub errors: Vec<f64>,
}

fn assign(patches: &[f32], dim: usize, centroids: &[f64], k: usize, labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (j, p) in patches.chunks(dim).enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..k {
            let d = sq_dist64(p, &centroids[i * dim..(i + 1) * dim]);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        labels[j] = best;
        total += best_d;
    }
    total / labels.len() as f64
}

/// k-means++ seeding followed by `iters` Lloyd iterations.
///
/// `patches` is a row-major `n × dim` matrix. A centroid whose cluster empties
/// keeps its previous position.
pub fn train_codebook(patches: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<CodebookFit> {
    if dim == 0 || patches.len() % dim != 0 {
        return Err(Error::dim("train_codebook", &[patches.len()], &[dim]));
    }
    let n = patches.len() / dim;
    if n < k {
        return Err(Error::Config(format!("{n} patches cannot train {k} centroids")));
    }
    if k < 2 {
        return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |j: usize| &patches[j * dim..(j + 1) * dim];

    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&x| x as f64));
    let mut d2: Vec<f64> = (0..n).map(|j| sq_dist64(row(j), &centroids[..dim])).collect();
    for c in 1..k {
        let dist = WeightedIndex::new(&d2)
            .map_err(|_| Error::Config(format!("fewer than {k} distinct patches; seeded {c} centroids")))?;
        let pick = dist.sample(&mut rng);
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&x| x as f64));
        for (j, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist64(row(j), &centroids[start..]));
        }
    }

    let mut labels = vec![0; n];
    let mut errors = vec![assign(patches, dim, &centroids, k, &mut labels)];
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (j, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row(j)) {
                *s += x as f64;
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                let inv = 1.0 / counts[i] as f64;
                for (c, s) in centroids[i * dim..(i + 1) * dim].iter_mut().zip(&sums[i * dim..(i + 1) * dim]) {
                    *c = s * inv;
                }
            }
        }
        errors.push(assign(patches, dim, &centroids, k, &mut labels));
    }
    let codebook = Codebook::new(
        k,
        dim,
        centroids.iter().map(|&c| c as f32).collect(),
        fingerprint(patches, dim),
    )?;
    Ok(CodebookFit { codebook, errors })
}

/// Visual token of every patch.
pub fn quantize(g: &PatchGrid, cb: &Codebook) -> Result<Vec<usize>> {
    if g.patch_dim() != cb.dim {
        return Err(Error::dim("quantize", &[g.n, g.patch_dim()], &[cb.k, cb.dim]));
    }
    Ok((0..g.n).map(|i| cb.nearest(g.patch(i))).collect())
}

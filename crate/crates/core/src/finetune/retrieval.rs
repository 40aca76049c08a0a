use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Symmetric in-batch contrastive loss over `S = exp(log_scale) · T Iᵀ`.
///
/// `texts` and `images` are unit-norm `[b, d_e]` embeddings of matched pairs.
/// Returns the loss and `S` (rows are texts, columns images).
pub fn itc_loss<T: Real>(tape: &mut Tape<T>, texts: Var, images: Var, log_scale: Var) -> Result<(Var, Var)> {
    let b = tape.shape(texts)[0];
    if tape.shape(images)[0] != b {
        return Err(Error::dim("itc_loss", tape.shape(texts), tape.shape(images)));
    }
    if b == 1 {
        log::warn!("contrastive loss over a single pair is identically zero");
    }
    let scale = tape.exp(log_scale);
    let it = tape.transpose(images)?;
    let sim = tape.matmul(texts, it)?;
    let s = tape.mul_scalar(sim, scale)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy(s, &diag)?;
    let st = tape.transpose(s)?;
    let cols = tape.cross_entropy(st, &diag)?;
    let both = tape.add(rows, cols)?;
    Ok((tape.scale(both, 0.5), s))
}

/// Which side of a pair is the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// A text retrieves images.
    TextToImage,
    /// An image retrieves texts.
    ImageToText,
}

/// Hard-negative distribution for query `i` over the `b × b` similarity
/// matrix `s` (texts × images): softmax of the query's similarities with
/// the matching entry excluded.
pub fn hard_negative_probs(s: &[f64], b: usize, i: usize, dir: Direction) -> Result<Vec<f64>> {
    if s.len() != b * b || i >= b {
        return Err(Error::dim("hard_negative_probs", &[s.len()], &[b, b]));
    }
    if b < 2 {
        return Err(Error::Contract("hard negatives need at least two pairs".into()));
    }
    let score = |j: usize| match dir {
        Direction::TextToImage => s[i * b + j],
        Direction::ImageToText => s[j * b + i],
    };
    let max = (0..b).filter(|&j| j != i).map(score).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..b).map(|j| if j == i { 0.0 } else { (score(j) - max).exp() }).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

pub fn sample_hard_negative<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let w = WeightedIndex::new(probs).map_err(|e| Error::Numeric(format!("hard-negative weights: {e}")))?;
    Ok(w.sample(rng))
}

/// Unit-norm dual-encoder embeddings of a retrieval corpus.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub images: Vec<f32>,
    pub texts: Vec<f32>,
    pub image_ids: Vec<usize>,
    pub text_ids: Vec<usize>,
}

fn check_unit(rows: &[f32], dim: usize) -> Result<()> {
    for (i, r) in rows.chunks(dim).enumerate() {
        let n = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("index row {i} has norm {n}")));
        }
    }
    Ok(())
}

impl RetrievalIndex {
    /// Corpus whose item `i` has id `i` on both sides.
    pub fn new(dim: usize, images: Vec<f32>, texts: Vec<f32>) -> Result<Self> {
        if dim == 0 || images.len() % dim != 0 || texts.len() % dim != 0 {
            return Err(Error::dim("RetrievalIndex", &[images.len(), texts.len()], &[dim]));
        }
        check_unit(&images, dim)?;
        check_unit(&texts, dim)?;
        Ok(Self {
            dim,
            image_ids: (0..images.len() / dim).collect(),
            text_ids: (0..texts.len() / dim).collect(),
            images,
            texts,
        })
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn text(&self, i: usize) -> &[f32] {
        &self.texts[i * self.dim..(i + 1) * self.dim]
    }

    /// Stage-1 shortlist: ids of the `k` images closest to a text embedding.
    pub fn images_for(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        let top = cosine_top_k(query, &self.images, self.dim, k)?;
        Ok(top.into_iter().map(|j| self.image_ids[j]).collect())
    }

    /// Stage-1 shortlist: ids of the `k` texts closest to an image embedding.
    pub fn texts_for(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        let top = cosine_top_k(query, &self.texts, self.dim, k)?;
        Ok(top.into_iter().map(|j| self.text_ids[j]).collect())
    }
}

/// Row indices of the `k` rows with the highest cosine similarity to
/// `query`, best first, lower index on ties.
pub fn cosine_top_k(query: &[f32], rows: &[f32], dim: usize, k: usize) -> Result<Vec<usize>> {
    if query.len() != dim || dim == 0 || rows.len() % dim != 0 {
        return Err(Error::dim("cosine_top_k", &[query.len()], &[dim]));
    }
    let n = rows.len() / dim;
    if n == 0 {
        return Err(Error::Contract("retrieval over an empty index".into()));
    }
    if k > n {
        return Err(Error::Contract(format!("top-{k} requested from {n} candidates")));
    }
    let qn = query.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt().max(1e-12);
    let scores: Vec<f64> = rows
        .chunks(dim)
        .map(|r| {
            let dot: f64 = r.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            let rn = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt().max(1e-12);
            dot / (qn * rn)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Stage 2: orders `candidates` by descending `scores`, keeping the
/// stage-1 order among equal scores.
pub fn rerank(candidates: &[usize], scores: &[f64]) -> Result<Vec<usize>> {
    if candidates.len() != scores.len() {
        return Err(Error::dim("rerank", &[candidates.len()], &[scores.len()]));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order.into_iter().map(|i| candidates[i]).collect())
}

/// Fraction of queries whose gold id is among the first `k` ranked ids.
pub fn recall_at_k(ranked: &[Vec<usize>], gold: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != gold.len() {
        return Err(Error::Contract(format!("{} ranked lists but {} gold ids", ranked.len(), gold.len())));
    }
    if ranked.is_empty() {
        return Err(Error::Contract("recall over no queries".into()));
    }
    let hits = ranked
        .iter()
        .zip(gold)
        .filter(|(r, g)| r.iter().take(k).any(|x| x == *g))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn singleton_contrast_is_zero() {
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(&Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let i = tape.leaf(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let s = tape.leaf(&Tensor::scalar(2.0));
        let (loss, _) = itc_loss(&mut tape, t, i, s).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn two_pairs_force_the_negative() {
        let s = [0.3, -1.0, 2.0, 0.1];
        assert_eq!(hard_negative_probs(&s, 2, 0, Direction::TextToImage).unwrap(), vec![0.0, 1.0]);
        assert_eq!(hard_negative_probs(&s, 2, 1, Direction::ImageToText).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn gold_at_rank_two() {
        let ranked = vec![vec![4, 1, 2], vec![0, 3, 1]];
        let gold = [1, 3];
        assert_eq!(recall_at_k(&ranked, &gold, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, &gold, 2).unwrap(), 1.0);
        assert!(recall_at_k(&ranked, &gold[..1], 1).is_err());
    }

    #[test]
    fn ties_keep_lower_ids() {
        let rows = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(cosine_top_k(&[1.0, 0.0], &rows, 2, 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(rerank(&[7, 3, 5], &[0.5, 0.5, 0.5]).unwrap(), vec![7, 3, 5]);
        assert!(cosine_top_k(&[1.0, 0.0], &[], 2, 0).is_err());
    }
}

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vlbeit::codebook::{quantize, train_codebook, Codebook};
use vlbeit::config::Config;
use vlbeit::input::synthetic::{generate_item, Sample, SyntheticTask};
use vlbeit::input::{patchify, PatchGrid};
use vlbeit::pipeline::train_tokenizer;
use vlbeit::Error;

#[test]
fn two_separated_clusters_are_recovered() {
    let dim = 12;
    let means = [vec![0.2f32; dim], vec![0.8f32; dim]];
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pts = Vec::new();
    for i in 0..400 {
        pts.extend(means[i % 2].iter().map(|&m| m + noise.sample(&mut rng) as f32));
    }
    let cb = train_codebook(&pts, dim, 2, 10, 7).unwrap().codebook;
    let mut found: Vec<&[f32]> = (0..2).map(|i| cb.centroid(i)).collect();
    found.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
    for (c, m) in found.iter().zip(&means) {
        for (x, y) in c.iter().zip(m) {
            assert!((x - y).abs() <= 0.05);
        }
    }
}

#[test]
fn quantize_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 4 * 4 * 3;
    let k = 9;
    let centroids: Vec<f32> = (0..k * dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let cb = Codebook::new(k, dim, centroids.clone(), 0).unwrap();
    let img = vlbeit::input::RawImage::new(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect())
        .unwrap();
    let g = patchify(&img, 4).unwrap();
    let tokens = quantize(&g, &cb).unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        let dist = |c: usize| -> f64 {
            (0..dim)
                .map(|j| (g.patch(i)[j] as f64 - centroids[c * dim + j] as f64).powi(2))
                .sum()
        };
        let best = (0..k).min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap()).unwrap();
        assert_eq!(t, best);
    }
}

#[test]
fn exact_hits_and_ties() {
    let cb = Codebook::new(5, 1, vec![10.0, -1.0, 7.0, 3.0, 1.0], 0).unwrap();
    assert_eq!(cb.nearest(&[3.0]), 3);
    assert_eq!(cb.nearest(&[0.0]), 1);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let cb = Codebook::new(2, 5, vec![0.0; 10], 0).unwrap();
    let g = patchify(&vlbeit::input::RawImage::blank(8, 8), 4).unwrap();
    assert!(matches!(quantize(&g, &cb), Err(Error::Dimension { .. })));
}

#[test]
fn desk_tokenizer_uses_at_least_half_the_codes() {
    let cfg = Config::default();
    let fit = train_tokenizer(&cfg).unwrap();
    assert_eq!(fit.codebook.k, 32);
    let mut used = HashSet::new();
    for i in 0..64 {
        if let Sample::Image { image } = generate_item(99, SyntheticTask::Images, i, cfg.image_size) {
            used.extend(quantize(&patchify(&image, cfg.patch_size).unwrap(), &fit.codebook).unwrap());
        }
    }
    assert!(used.len() >= 16, "{} codes used", used.len());
    let a = fit.codebook.centroids.chunks(fit.codebook.dim).collect::<Vec<_>>();
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            assert_ne!(a[i], a[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_error_never_increases(seed in any::<u64>(), k in 2usize..8, n in 8usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f32> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let fit = train_codebook(&pts, 3, k, 8, seed).unwrap();
        prop_assert!(fit.errors.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let again = train_codebook(&pts, 3, k, 8, seed).unwrap();
        prop_assert_eq!(fit.codebook, again.codebook);
    }

    #[test]
    fn centroids_label_themselves(seed in any::<u64>(), k in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2 * 2 * 3;
        let pts: Vec<f32> = (0..40 * dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let cb = train_codebook(&pts, dim, k, 5, seed).unwrap().codebook;
        let g = PatchGrid {
            n: k,
            patch_size: 2,
            channels: 3,
            grid_h: 1,
            grid_w: k,
            patches: cb.centroids.clone(),
        };
        prop_assert_eq!(quantize(&g, &cb).unwrap(), (0..k).collect::<Vec<_>>());
    }
}

mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{model, small};
use vlbeit::backbone::ExpertSet;
use vlbeit::input::repr::{build_image_repr, build_text_repr, concat_pair};
use vlbeit::input::{patchify, RawImage, TextTokens, NUM_SPECIALS, T_MASK};
use vlbeit::masking::{
    apply_mask, plan_blockwise, plan_mlm, plan_mvlm, MaskConfig, MaskPlan, TextAction, TextMask,
};
use vlbeit::tensor::Tape;

const VOCAB: usize = 300;

fn words(m: usize) -> TextTokens {
    TextTokens { ids: (0..m).map(|i| 100 + i).collect() }
}

#[test]
fn mlm_actions_follow_eighty_ten_ten() {
    let cfg = MaskConfig::new(VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts: HashMap<TextAction, usize> = HashMap::new();
    let mut total = 0;
    let mut plans = 0;
    while plans < 10_000 {
        let m = rng.random_range(1..=14);
        for t in plan_mlm(&words(m), &cfg, &mut rng).text {
            *counts.entry(t.action).or_default() += 1;
            total += 1;
        }
        plans += 1;
    }
    assert!(total >= 10_000);
    for (action, p) in [(TextAction::Mask, 0.8), (TextAction::Random, 0.1), (TextAction::Keep, 0.1)] {
        let f = counts[&action] as f64 / total as f64;
        assert!((f - p).abs() <= 0.02, "{action:?}: {f}");
    }
}

#[test]
fn paper_grid_always_masks_seventy_nine() {
    let cfg = MaskConfig::new(VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..2000 {
        let p = plan_blockwise(196, 14, 14, 0.4, &cfg, &mut rng).unwrap();
        assert!(p.image.len() >= 79);
        assert!(p.image.windows(2).all(|w| w[0] < w[1]) && *p.image.last().unwrap() < 196);
    }
}

/// Fraction of masked cells with a masked 4-neighbour.
fn clustering(mask: &[usize], h: usize, w: usize) -> f64 {
    let set: Vec<bool> = (0..h * w).map(|i| mask.contains(&i)).collect();
    let with_neighbour = mask
        .iter()
        .filter(|&&i| {
            let (y, x) = (i / w, i % w);
            (y > 0 && set[i - w]) || (y + 1 < h && set[i + w]) || (x > 0 && set[i - 1]) || (x + 1 < w && set[i + 1])
        })
        .count();
    with_neighbour as f64 / mask.len() as f64
}

#[test]
fn small_grid_ratio_and_clustering() {
    let cfg = MaskConfig::new(VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ratio, mut block, mut uniform) = (0.0, 0.0, 0.0);
    let draws = 10_000;
    for _ in 0..draws {
        let p = plan_blockwise(16, 4, 4, 0.4, &cfg, &mut rng).unwrap();
        assert!(p.image.len() >= 7);
        ratio += p.image_ratio;
        block += clustering(&p.image, 4, 4);
        let u = sample(&mut rng, 16, p.image.len()).into_vec();
        uniform += clustering(&u, 4, 4);
    }
    let ratio = ratio / draws as f64;
    assert!((0.40..=0.60).contains(&ratio), "mean ratio {ratio}");
    assert!(block > uniform, "block {block} vs uniform {uniform}");
}

#[test]
fn mvlm_plan_has_disjoint_tagged_halves() {
    let cfg = MaskConfig::new(VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = plan_mvlm(&words(8), 16, 4, 4, &cfg, &mut rng).unwrap();
    assert_eq!(p.text.len(), 4);
    assert!(p.image.len() >= 7);
    assert!(p.text.iter().all(|t| (1..=8).contains(&t.position)));
    assert!(p.image.iter().all(|&i| i < 16));
}

#[test]
fn mvlm_actions_can_be_switched_off() {
    let mut cfg = MaskConfig::new(VOCAB);
    cfg.mvlm_text_actions = false;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = plan_mvlm(&words(10), 16, 4, 4, &cfg, &mut rng).unwrap();
        assert!(p.text.iter().all(|t| t.action == TextAction::Mask && t.replacement == T_MASK));
    }
}

fn rows(v: &[f32], d: usize) -> Vec<&[f32]> {
    v.chunks(d).collect()
}

#[test]
fn apply_mask_changes_exactly_the_planned_rows() {
    let m = model::<f32>(small(ExpertSet::Mome), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = RawImage::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let g = patchify(&img, 8).unwrap();
    let mut tape = Tape::inference();
    let vars = m.bind(&mut tape);
    let t = build_text_repr(&mut tape, &vars.embed, &words(6)).unwrap();
    let i = build_image_repr(&mut tape, &vars.embed, &g).unwrap();
    let pair = concat_pair(&mut tape, &t, &i).unwrap();
    let d = 16;

    let same = apply_mask(&mut tape, &vars.embed, &pair, &MaskPlan::default()).unwrap();
    assert_eq!(tape.value(same.embeddings), tape.value(pair.embeddings));

    let one = MaskPlan { image: vec![5], ..Default::default() };
    let out = apply_mask(&mut tape, &vars.embed, &pair, &one).unwrap();
    let (a, b) = (rows(tape.value(pair.embeddings), d), rows(tape.value(out.embeddings), d));
    let changed: Vec<usize> = (0..a.len()).filter(|&r| a[r] != b[r]).collect();
    assert_eq!(changed, vec![pair.patch_row(5)]);

    let text: Vec<TextMask> = [(1, TextAction::Mask, T_MASK), (3, TextAction::Random, 250), (4, TextAction::Keep, 102)]
        .into_iter()
        .map(|(position, action, replacement)| TextMask { position, action, original: 100 + position - 1, replacement })
        .collect();
    let plan = MaskPlan { text, image: vec![0, 15], ..Default::default() };
    let out = apply_mask(&mut tape, &vars.embed, &pair, &plan).unwrap();
    let (a, b) = (rows(tape.value(pair.embeddings), d), rows(tape.value(out.embeddings), d));
    let changed: Vec<usize> = (0..a.len()).filter(|&r| a[r] != b[r]).collect();
    assert_eq!(changed, vec![1, 3, pair.patch_row(0), pair.patch_row(15)]);
    let tok = rows(tape.value(vars.embed.text_tokens), d);
    let pos = rows(tape.value(vars.embed.text_pos), d);
    let imask = tape.value(vars.embed.image_mask);
    let ipos = rows(tape.value(vars.embed.image_pos), d);
    for j in 0..d {
        assert_eq!(b[1][j], tok[T_MASK][j] + pos[1][j]);
        assert_eq!(b[3][j], tok[250][j] + pos[3][j]);
        assert_eq!(b[pair.patch_row(15)][j], imask[j] + ipos[16][j]);
    }
}

#[test]
fn apply_mask_rejects_out_of_range_rows() {
    let m = model::<f32>(small(ExpertSet::Mome), 8);
    let mut tape = Tape::inference();
    let vars = m.bind(&mut tape);
    let t = build_text_repr(&mut tape, &vars.embed, &words(3)).unwrap();
    let bad = MaskPlan {
        text: vec![TextMask { position: 4, action: TextAction::Mask, original: 0, replacement: T_MASK }],
        ..Default::default()
    };
    assert!(matches!(apply_mask(&mut tape, &vars.embed, &t, &bad), Err(vlbeit::Error::Contract(_))));
}

proptest! {
    #[test]
    fn text_plans_follow_the_count_policy(m in 0usize..40, seed in any::<u64>(), mvlm in any::<bool>()) {
        let cfg = MaskConfig::new(VOCAB);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ratio) = if mvlm {
            (plan_mvlm(&words(m), 16, 4, 4, &cfg, &mut rng).unwrap(), 0.5)
        } else {
            (plan_mlm(&words(m), &cfg, &mut rng), 0.15)
        };
        let want = if m == 0 { 0 } else { ((ratio * m as f64 + 1e-9).floor() as usize).max(1) };
        prop_assert_eq!(p.text.len(), want);
        prop_assert!(p.text.windows(2).all(|w| w[0].position < w[1].position));
        for t in &p.text {
            prop_assert!((1..=m).contains(&t.position));
            prop_assert_eq!(t.original, 100 + t.position - 1);
            match t.action {
                TextAction::Mask => prop_assert_eq!(t.replacement, T_MASK),
                TextAction::Keep => prop_assert_eq!(t.replacement, t.original),
                TextAction::Random => prop_assert!((NUM_SPECIALS..VOCAB).contains(&t.replacement)),
            }
        }
    }

    #[test]
    fn block_plans_reach_the_target(h in 1usize..10, w in 1usize..10, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let cfg = MaskConfig::new(VOCAB);
        let n = h * w;
        let p = plan_blockwise(n, h, w, ratio, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(p.image.len() >= (ratio * n as f64 - 1e-9).ceil() as usize);
        prop_assert!(p.image.windows(2).all(|x| x[0] < x[1]));
        prop_assert!(p.image.iter().all(|&i| i < n));
    }

    #[test]
    fn plans_are_deterministic(seed in any::<u64>(), m in 1usize..15) {
        let cfg = MaskConfig::new(VOCAB);
        let a = plan_mvlm(&words(m), 16, 4, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = plan_mvlm(&words(m), 16, 4, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{model, small};
use vlbeit::backbone::{encode, ExpertSet, MomeModel};
use vlbeit::config::Config;
use vlbeit::finetune::{
    avgpool, cosine_top_k, fusion_classify, hard_negative_probs, itc_loss, itm_logits, nlvr_features, recall_at_k,
    rerank, sample_hard_negative, Direction, FtContext, FtExample, FtTask, Finetuner, Heads,
};
use vlbeit::input::repr::{build_image_repr, InputRepr};
use vlbeit::input::synthetic::{IMGCLS_CLASSES, VQA_ANSWERS};
use vlbeit::input::{patchify, PatchGrid, RawImage, TextTokens};
use vlbeit::pipeline::ft_config;
use vlbeit::tensor::Tape;

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for r in v.chunks_mut(d) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn itc_value(t: &[f64], i: &[f64], b: usize, d: usize, log_scale: f64) -> f64 {
    let mut tape = Tape::<f64>::inference();
    let tv = tape.constant(&[b, d], t.to_vec()).unwrap();
    let iv = tape.constant(&[b, d], i.to_vec()).unwrap();
    let ls = tape.constant(&[1], vec![log_scale]).unwrap();
    let (loss, _) = itc_loss(&mut tape, tv, iv, ls).unwrap();
    tape.scalar(loss)
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn itc_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, d) = (4, 6);
    let t = unit_rows(&mut rng, b, d);
    let i = unit_rows(&mut rng, b, d);
    let log_scale = 1.3f64;
    let s = |r: usize, c: usize| log_scale.exp() * (0..d).map(|k| t[r * d + k] * i[c * d + k]).sum::<f64>();
    let rows: f64 = (0..b).map(|r| log_sum_exp((0..b).map(|c| s(r, c))) - s(r, r)).sum::<f64>() / b as f64;
    let cols: f64 = (0..b).map(|c| log_sum_exp((0..b).map(|r| s(r, c))) - s(c, c)).sum::<f64>() / b as f64;
    let want = 0.5 * (rows + cols);
    assert!((itc_value(&t, &i, b, d, log_scale) - want).abs() <= 1e-12);
}

#[test]
fn orthonormal_pairs_at_high_scale_have_no_contrastive_loss() {
    let (b, d) = (4, 4);
    let eye: Vec<f64> = (0..b * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    assert!(itc_value(&eye, &eye, b, d, 100f64.ln()) <= 1e-12);
    let chance = itc_value(&eye, &eye, b, d, -30.0);
    assert!((chance - (b as f64).ln()).abs() <= 1e-9);
}

#[test]
fn hard_negative_frequencies_follow_the_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = 5;
    let s: Vec<f64> = (0..b * b).map(|_| rng.random_range(-2.0..2.0)).collect();
    for dir in [Direction::TextToImage, Direction::ImageToText] {
        let q = 2;
        let score = |j: usize| if dir == Direction::TextToImage { s[q * b + j] } else { s[j * b + q] };
        let z: f64 = (0..b).filter(|&j| j != q).map(|j| score(j).exp()).sum();
        let p = hard_negative_probs(&s, b, q, dir).unwrap();
        let mut counts = vec![0usize; b];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_hard_negative(&p, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[q], 0);
        for j in (0..b).filter(|&j| j != q) {
            let want = score(j).exp() / z;
            assert!((p[j] - want).abs() <= 1e-12);
            assert!((counts[j] as f64 / draws as f64 - want).abs() <= 0.03, "{dir:?} {j}");
        }
    }
    assert!(hard_negative_probs(&[0.0], 1, 0, Direction::TextToImage).is_err());
}

#[test]
fn random_rankings_give_chance_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100;
    let mut ranked = Vec::new();
    let mut gold = Vec::new();
    for _ in 0..1000 {
        let mut r: Vec<usize> = (0..n).collect();
        r.shuffle(&mut rng);
        ranked.push(r);
        gold.push(rng.random_range(0..n));
    }
    let r1 = recall_at_k(&ranked, &gold, 1).unwrap();
    assert!((r1 - 0.01).abs() <= 0.01, "{r1}");
    let r10 = recall_at_k(&ranked, &gold, 10).unwrap();
    assert!((r10 - 0.1).abs() <= 0.03, "{r10}");
    assert_eq!(recall_at_k(&ranked, &gold, n).unwrap(), 1.0);
}

#[test]
fn cosine_top_k_matches_a_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 5;
    let rows: Vec<f32> = (0..30 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cos = |r: usize| {
        let row = &rows[r * d..(r + 1) * d];
        let dot: f64 = row.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
        let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (n(row) * n(&q))
    };
    let mut all: Vec<usize> = (0..30).collect();
    all.sort_by(|&a, &b| cos(b).partial_cmp(&cos(a)).unwrap());
    assert_eq!(cosine_top_k(&q, &rows, d, 7).unwrap(), all[..7]);
    assert!(cosine_top_k(&q, &rows, d, 31).is_err());
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 2usize..30, queries in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranked: Vec<Vec<usize>> = (0..queries).map(|_| {
            let mut r: Vec<usize> = (0..n).collect();
            r.shuffle(&mut rng);
            r
        }).collect();
        let gold: Vec<usize> = (0..queries).map(|_| rng.random_range(0..n)).collect();
        let r: Vec<f64> = (1..=n).map(|k| recall_at_k(&ranked, &gold, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[n - 1], 1.0);
    }

    #[test]
    fn itc_ignores_the_order_of_pairs(seed in any::<u64>(), b in 2usize..7, log_scale in -1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let t = unit_rows(&mut rng, b, d);
        let i = unit_rows(&mut rng, b, d);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let permute = |x: &[f64]| perm.iter().flat_map(|&p| x[p * d..(p + 1) * d].to_vec()).collect::<Vec<_>>();
        let a = itc_value(&t, &i, b, d, log_scale);
        let c = itc_value(&permute(&t), &permute(&i), b, d, log_scale);
        prop_assert!((a - c).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn rerank_sorts_the_shortlist(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<usize> = (0..k).map(|_| rng.random_range(0..1000)).collect();
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        let out = rerank(&cands, &scores).unwrap();
        let mut sorted = out.clone();
        sorted.sort();
        let mut want = cands.clone();
        want.sort();
        prop_assert_eq!(sorted, want);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        prop_assert_eq!(out, order.iter().map(|&i| cands[i]).collect::<Vec<_>>());
    }
}

fn grid(seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RawImage::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    patchify(&img, 8).unwrap()
}

fn text(ids: &[usize]) -> TextTokens {
    TextTokens { ids: ids.to_vec() }
}

fn setup(task: FtTask, seed: u64) -> (MomeModel<f64>, Heads<f64>) {
    let m = model::<f64>(small(ExpertSet::Mome), seed);
    let h = Heads::new(task, 16, 8, &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
    (m, h)
}

#[test]
fn head_shapes_follow_the_label_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut numel = |task| Heads::<f32>::new(task, 16, 8, &mut rng).unwrap().params.numel();
    assert_eq!(numel(FtTask::Vqa), 16 * VQA_ANSWERS.len() + VQA_ANSWERS.len());
    assert_eq!(numel(FtTask::Nlvr), 32 * 2 + 2);
    assert_eq!(numel(FtTask::ImgCls), 16 * IMGCLS_CLASSES + IMGCLS_CLASSES);
    assert_eq!(numel(FtTask::Retrieval), 16 * 2 + 2 + 2 * (16 * 8 + 8) + 1);
    assert!(Heads::<f32>::new(FtTask::Retrieval, 16, 17, &mut rng).is_err());
}

#[test]
fn avgpool_is_the_mean_of_encoded_rows() {
    let (m, h) = setup(FtTask::ImgCls, 1);
    let (a, b) = (grid(1), grid(2));
    let mut tape = Tape::inference();
    let mv = m.bind(&mut tape);
    let hv = h.bind(&mut tape);
    let ctx = FtContext { model: &m.cfg, vars: &mv, heads: &hv, training: false };
    let pooled = avgpool(&mut tape, &ctx, &[&a, &b], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pooled = tape.value(pooled).to_vec();
    for (k, g) in [&a, &b].into_iter().enumerate() {
        let r: InputRepr = build_image_repr(&mut tape, &mv.embed, g).unwrap();
        let e = encode(&mut tape, &m.cfg, &mv, &[&r], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rows = tape.value(e.hidden);
        for j in 0..16 {
            let mean = (0..17).map(|r| rows[r * 16 + j]).sum::<f64>() / 17.0;
            assert!((pooled[k * 16 + j] - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn nlvr_features_swap_with_the_images() {
    let (m, h) = setup(FtTask::Nlvr, 2);
    let (l, r, s) = (grid(3), grid(4), text(&[270, 280, 290]));
    let mut tape = Tape::inference();
    let mv = m.bind(&mut tape);
    let hv = h.bind(&mut tape);
    let ctx = FtContext { model: &m.cfg, vars: &mv, heads: &hv, training: false };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ab = nlvr_features(&mut tape, &ctx, &[(&l, &r, &s)], &mut rng).unwrap();
    let ba = nlvr_features(&mut tape, &ctx, &[(&r, &l, &s)], &mut rng).unwrap();
    let same = nlvr_features(&mut tape, &ctx, &[(&l, &l, &s)], &mut rng).unwrap();
    let (ab, ba, same) = (tape.value(ab), tape.value(ba), tape.value(same));
    assert_eq!(&ab[..16], &ba[16..]);
    assert_eq!(&ab[16..], &ba[..16]);
    assert_eq!(&same[..16], &same[16..]);
    assert_ne!(&ab[..16], &ab[16..]);
}

#[test]
fn zero_answer_head_is_uniform() {
    let (m, mut h) = setup(FtTask::Vqa, 3);
    for id in h.params.ids().collect::<Vec<_>>() {
        h.params.get_mut(id).data_mut().fill(0.0);
    }
    let (g, q) = (grid(5), text(&[280, 281]));
    let mut tape = Tape::inference();
    let mv = m.bind(&mut tape);
    let hv = h.bind(&mut tape);
    let ctx = FtContext { model: &m.cfg, vars: &mv, heads: &hv, training: false };
    let logits = fusion_classify(&mut tape, &ctx, &[(&g, &q)], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ce = tape.cross_entropy(logits, &[3]).unwrap();
    assert!((tape.scalar(ce) - (VQA_ANSWERS.len() as f64).ln()).abs() <= 1e-12);
}

#[test]
fn untrained_matching_loss_is_near_ln_two() {
    let (m, h) = setup(FtTask::Retrieval, 4);
    let grids: Vec<PatchGrid> = (0..16).map(|i| grid(10 + i)).collect();
    let texts: Vec<TextTokens> = (0..16).map(|i| text(&[270 + i as usize, 280])).collect();
    let pairs: Vec<(&PatchGrid, &TextTokens)> = grids.iter().zip(&texts).collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mut tape = Tape::inference();
    let mv = m.bind(&mut tape);
    let hv = h.bind(&mut tape);
    let ctx = FtContext { model: &m.cfg, vars: &mv, heads: &hv, training: false };
    let logits = itm_logits(&mut tape, &ctx, &pairs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ce = tape.cross_entropy(logits, &labels).unwrap();
    assert!((tape.scalar(ce) - 2f64.ln()).abs() <= 0.1, "{}", tape.scalar(ce));
}

#[test]
fn flat_matching_head_keeps_the_dual_encoder_order() {
    let mut cfg = Config::default();
    cfg.layers = 1;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.embed_dim = 8;
    let m = model::<f32>(cfg.model(293), 5);
    let mut h = Heads::<f32>::new(FtTask::Retrieval, 16, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for name in ["itm/w", "itm/b"] {
        let id = h.params.id(name).unwrap();
        h.params.get_mut(id).data_mut().fill(0.0);
    }
    let f = Finetuner::new(m, h, ft_config(&cfg)).unwrap();
    let data: Vec<FtExample> = (0..12)
        .map(|i| FtExample::Pair { image: grid(40 + i), text: text(&[270 + i as usize, 290]), caption: format!("c{i}") })
        .collect();
    let index = f.build_index(&data).unwrap();
    let ranked = f.rerank_all(&data, &index, Direction::TextToImage, 5).unwrap();
    for (q, r) in ranked.iter().enumerate() {
        assert_eq!(r, &index.images_for(index.text(q), 5).unwrap());
    }
    let ranked = f.rerank_all(&data, &index, Direction::ImageToText, 5).unwrap();
    for (q, r) in ranked.iter().enumerate() {
        assert_eq!(r, &index.texts_for(index.image(q), 5).unwrap());
    }
}

#[test]
fn finetune_steps_are_reproducible() {
    let mut cfg = Config::default();
    cfg.layers = 1;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.embed_dim = 8;
    cfg.ft_batch = 4;
    cfg.ft_train_size = 32;
    cfg.ft_steps = 3;
    cfg.ft_warmup = 1;
    let ftc = ft_config(&cfg);
    let vocab = vlbeit::input::Vocab::synthetic();
    for task in FtTask::ALL {
        let data = vlbeit::finetune::train_examples(&ftc, task, &vocab).unwrap();
        let run = || {
            let m = model::<f32>(cfg.model(293), 7);
            let h = Heads::new(task, 16, 8, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let mut f = Finetuner::new(m, h, ftc.clone()).unwrap();
            let losses: Vec<f64> = (0..3).map(|_| f.train_step(&data).unwrap().loss).collect();
            (losses, f.model.params.get(f.model.params.id("final_ln/g").unwrap()).data().to_vec())
        };
        let (a, b) = (run(), run());
        assert!(a.0.iter().all(|l| l.is_finite()), "{task}");
        assert_eq!(a, b, "{task}");
    }
}

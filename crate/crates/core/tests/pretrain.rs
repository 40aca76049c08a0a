mod common;

use proptest::prelude::*;

use vlbeit::config::Config;
use vlbeit::input::Vocab;
use vlbeit::param::ParamStore;
use vlbeit::pipeline::{held_out_batch, init_pretrainer, pretrain_batch, run_pretrain, CHECKPOINT_FILE};
use vlbeit::pretrain::checkpoint::{self, NamedTensor};
use vlbeit::pretrain::{adam_step, lr_at_step, AdamConfig, AdamState, Pretrainer, Task};
use vlbeit::tensor::{Tape, Tensor};
use vlbeit::Error;

/// Scalar Adam with decoupled decay, written out longhand.
fn adam_oracle(w0: f64, target: f64, lrs: &[f64], cfg: &AdamConfig) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &lr) in lrs.iter().enumerate() {
        let t = (t + 1) as i32;
        let g = 2.0 * (w - target);
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        w = w - lr * cfg.weight_decay * w - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_tracks_the_scalar_oracle_on_a_quadratic() {
    let cfg = AdamConfig { weight_decay: 0.1, ..Default::default() };
    let lrs: Vec<f64> = (1..=10).map(|s| lr_at_step(s, 0.3, 3, 10)).collect();
    let want = adam_oracle(-1.0, 3.0, &lrs, &cfg);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(-1.0), true);
    let mut state = AdamState::new(&store);
    for (s, &lr) in lrs.iter().enumerate() {
        store.zero_grad();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let shift = tape.constant(&[1], vec![-3.0]).unwrap();
        let d = tape.add(bound.var(id), shift).unwrap();
        let sq = tape.mul(d, d).unwrap();
        tape.backward(sq).unwrap();
        store.accumulate_grads(&tape, &bound).unwrap();
        adam_step(&mut store, &mut state, lr, &cfg).unwrap();
        let got = store.get(id).data()[0];
        assert!((got - want[s]).abs() <= 1e-10, "step {}: {got} vs {}", s + 1, want[s]);
    }
    assert_eq!(state.step, 10);
}

#[test]
fn undecayed_tensors_ignore_weight_decay() {
    let cfg = AdamConfig { weight_decay: 0.5, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::scalar(2.0), true);
    let b = store.add("b", Tensor::scalar(2.0), false);
    let mut state = AdamState::new(&store);
    adam_step(&mut store, &mut state, 0.1, &cfg).unwrap();
    assert!((store.get(a).data()[0] - 1.9).abs() <= 1e-15);
    assert_eq!(store.get(b).data()[0], 2.0);
}

#[test]
fn schedule_endpoints_and_boundary() {
    for (peak, warmup, steps) in [(2e-3, 100, 2000), (1.0, 1, 10), (5e-4, 300, 3000)] {
        assert_eq!(lr_at_step(0, peak, warmup, steps), 0.0);
        assert_eq!(lr_at_step(warmup, peak, warmup, steps), peak);
        assert!(lr_at_step(steps, peak, warmup, steps) <= 1e-12);
        let ramp_end = peak * warmup as f64 / warmup as f64;
        assert!((ramp_end - lr_at_step(warmup, peak, warmup, steps)).abs() <= 1e-12 * peak);
        let step_in = lr_at_step(warmup - 1, peak, warmup, steps);
        let step_out = lr_at_step(warmup + 1, peak, warmup, steps);
        assert!((peak - step_in - peak / warmup as f64).abs() <= 1e-12 * peak);
        assert!(peak - step_out <= peak / warmup as f64);
    }
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(warmup in 1usize..200, extra in 1usize..2000, peak in 1e-5f64..1e-1) {
        let steps = warmup + extra;
        let lr: Vec<f64> = (0..=steps + 5).map(|s| lr_at_step(s, peak, warmup, steps)).collect();
        prop_assert!(lr[..=warmup].windows(2).all(|w| w[0] < w[1]));
        prop_assert!(lr[warmup..].windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lr.iter().all(|&x| (0.0..=peak).contains(&x)));
        prop_assert!(lr[steps] <= 1e-12);
    }
}

#[test]
fn untrained_losses_sit_at_chance() {
    let cfg = Config::default();
    let p = init_pretrainer(&cfg).unwrap();
    let vocab = Vocab::synthetic();
    let batch = held_out_batch(&cfg, &vocab, p.codebook.as_ref(), 0).unwrap();
    let r = p.evaluate(&batch, 1, false).unwrap();
    let (lv, lk) = ((vocab.size() as f64).ln(), (cfg.codebook_size as f64).ln());
    let loss = |t: Task| r.tasks.iter().find(|s| s.task == t).unwrap().loss;
    assert!((loss(Task::Mlm) - lv).abs() <= 0.5, "mlm {}", loss(Task::Mlm));
    assert!((loss(Task::Mim) - lk).abs() <= 0.5, "mim {}", loss(Task::Mim));
    assert!((loss(Task::Mvlm) - (lv + lk)).abs() <= 1.0, "mvlm {}", loss(Task::Mvlm));
    let sum: f64 = r.tasks.iter().map(|s| s.loss).sum();
    assert!((r.total - sum).abs() <= 1e-4 * sum);
}

#[test]
fn single_task_total_is_that_task() {
    let mut cfg = Config::default();
    cfg.tasks = vec![Task::Mvlm];
    let p = init_pretrainer(&cfg).unwrap();
    let batch = held_out_batch(&cfg, &Vocab::synthetic(), p.codebook.as_ref(), 0).unwrap();
    let r = p.evaluate(&batch, 3, false).unwrap();
    assert_eq!(r.tasks.len(), 1);
    assert!((r.total - r.tasks[0].loss).abs() <= 1e-4 * r.total);
    let parts = r.tasks[0].text.unwrap().loss + r.tasks[0].image.unwrap().loss;
    assert!((r.tasks[0].loss - parts).abs() <= 1e-9 * parts);
}

#[test]
fn mlm_overfits_a_fixed_batch() {
    let mut cfg = Config::default();
    cfg.tasks = vec![Task::Mlm];
    cfg.batch_texts = 8;
    let mut p = init_pretrainer(&cfg).unwrap();
    let batch = pretrain_batch(&cfg, &Vocab::synthetic(), p.codebook.as_ref(), 1).unwrap();
    let mut acc = 0.0;
    for _ in 0..200 {
        acc = common::fixed_mask_step(&mut p, &batch, 5, 2e-3).unwrap().1[0].accuracy();
    }
    assert!(acc >= 0.95, "accuracy {acc}");
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.layers = 1;
    cfg.width = 32;
    cfg.codebook_size = 16;
    cfg.codebook_images = 16;
    cfg.batch_images = 2;
    cfg.batch_texts = 2;
    cfg.batch_pairs = 2;
    cfg.steps = 40;
    cfg.warmup_steps = 5;
    cfg
}

fn train(cfg: &Config, steps: u64) -> Pretrainer {
    let vocab = Vocab::synthetic();
    let mut p = init_pretrainer(cfg).unwrap();
    while p.step() < steps {
        let b = pretrain_batch(cfg, &vocab, p.codebook.as_ref(), p.step() + 1).unwrap();
        p.train_step(&b, cfg.seed).unwrap();
    }
    p
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let cfg = small_config();
    let a = checkpoint::encode(&train(&cfg, 10).to_tensors().unwrap()).unwrap();
    let b = checkpoint::encode(&train(&cfg, 10).to_tensors().unwrap()).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(a, checkpoint::encode(&train(&other, 10).to_tensors().unwrap()).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config();
    let p = train(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.vlbt");
    p.save(&path).unwrap();
    let q = Pretrainer::load(&path, p.model.cfg.clone(), cfg.train()).unwrap();
    assert_eq!(p.to_tensors().unwrap(), q.to_tensors().unwrap());
    assert_eq!(q.step(), 3);
    assert_eq!(q.codebook, p.codebook);
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::encode(&q.to_tensors().unwrap()).unwrap());
}

#[test]
fn awkward_floats_survive_encoding() {
    let t = vec![
        NamedTensor::new("x", &[2, 3], vec![f32::MIN_POSITIVE, -0.0, f32::MAX, 1e-45, f32::NAN, f32::INFINITY]),
        NamedTensor::new("scalar", &[], vec![1.5]),
        NamedTensor::new("empty", &[0], vec![]),
    ];
    let back = checkpoint::decode(&checkpoint::encode(&t).unwrap()).unwrap();
    for (a, b) in t.iter().zip(&back) {
        assert_eq!((&a.name, &a.shape), (&b.name, &b.shape));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.data), bits(&b.data));
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = vec![NamedTensor::new("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0])];
    let good = checkpoint::encode(&t).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut trailing = good.clone();
    trailing.push(0);
    for bytes in [&good[..good.len() - 1], &good[..3], &bad_magic[..], &bad_version[..], &trailing[..]] {
        assert!(matches!(checkpoint::decode(bytes), Err(Error::Format(_))));
    }
    let bad_shape = vec![NamedTensor::new("w", &[3], vec![1.0])];
    assert!(checkpoint::encode(&bad_shape).is_err());
}

#[test]
fn loading_into_a_different_model_fails() {
    let cfg = small_config();
    let p = train(&cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.vlbt");
    p.save(&path).unwrap();
    let mut wider = p.model.cfg.clone();
    wider.width = 48;
    assert!(Pretrainer::load(&path, wider, cfg.train()).is_err());
    let mut tensors = p.to_tensors().unwrap();
    tensors.retain(|t| t.name != "final_ln/g");
    assert!(Pretrainer::from_tensors(tensors, p.model.cfg.clone(), cfg.train()).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = small_config();
    cfg.steps = 20;
    let dir = tempfile::tempdir().unwrap();
    let (full, half) = (dir.path().join("full"), dir.path().join("half"));
    run_pretrain(&cfg, &full, None, |_| {}).unwrap();
    let mut first = cfg.clone();
    first.stop_step = 10;
    run_pretrain(&first, &half, None, |_| {}).unwrap();
    let resumed = dir.path().join("resumed");
    run_pretrain(&cfg, &resumed, Some(&half.join(CHECKPOINT_FILE)), |_| {}).unwrap();
    let a = std::fs::read(full.join(CHECKPOINT_FILE)).unwrap();
    let b = std::fs::read(resumed.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_past_the_stop_step_is_refused() {
    let mut cfg = small_config();
    cfg.steps = 4;
    cfg.warmup_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, dir.path(), None, |_| {}).unwrap();
    cfg.stop_step = 2;
    let err = run_pretrain(&cfg, &dir.path().join("again"), Some(&dir.path().join(CHECKPOINT_FILE)), |_| {});
    assert!(matches!(err, Err(Error::Config(_))));
}

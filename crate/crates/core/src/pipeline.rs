//! End-to-end runs assembled from a [`Config`]: tokenizer training, data
//! streams, pretraining with checkpoints and metrics.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ExpertSet, MoMEConfig, MomeModel};
use crate::codebook::{quantize, train_codebook, Codebook, CodebookFit};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::finetune::{eval_examples, train_examples, EvalReport, FtConfig, FtReport, FtTask, Finetuner, Heads};
use crate::input::image::{patchify, RawImage};
use crate::input::synthetic::{generate_item, noise_image, Sample, SyntheticTask};
use crate::input::text::{tokenize, TextTokens, Vocab};
use crate::pretrain::checkpoint::{self, NamedTensor};
use crate::pretrain::{
    codebook_tensors, mvlm_loss, split_checkpoint, store_tensors, Batch, ImageExample, LossContext, PairExample,
    Pretrainer, StepReport, Task,
};
use crate::masking::MaskConfig;
use crate::tensor::{grad_check, GradCheckReport, Tape};

/// Offset separating held-out item indices from training indices.
pub const HELD_OUT: u64 = 1 << 40;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.vlbt";
pub const SEED_FILE: &str = "seed.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const SUMMARY_FILE: &str = "eval.tsv";

/// Named sub-streams of the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Tokenizer,
    Finetune,
    HeadInit,
    Eval,
}

pub fn stream_seed(seed: u64, s: Stream) -> u64 {
    let salt = match s {
        Stream::Init => 0x1111,
        Stream::Tokenizer => 0x2222,
        Stream::Finetune => 0x3333,
        Stream::HeadInit => 0x4444,
        Stream::Eval => 0x5555,
    };
    let mut x = seed ^ (salt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

pub fn stream_rng(seed: u64, s: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, s))
}

pub fn image_example(img: &RawImage, cfg: &Config, cb: Option<&Codebook>) -> Result<ImageExample> {
    let grid = patchify(img, cfg.patch_size)?;
    let tokens = cb.map(|cb| quantize(&grid, cb)).transpose()?;
    Ok(ImageExample { grid, tokens })
}

pub fn text_tokens(text: &str, cfg: &Config, vocab: &Vocab) -> TextTokens {
    tokenize(text, vocab).truncated(cfg.max_text_len.saturating_sub(2))
}

/// k-means codebook over the patches of `codebook_images` synthetic images.
pub fn train_tokenizer(cfg: &Config) -> Result<CodebookFit> {
    let seed = stream_seed(cfg.seed, Stream::Tokenizer);
    let mut patches = Vec::new();
    let mut dim = 0;
    for i in 0..cfg.codebook_images as u64 {
        if let Sample::Image { image } = generate_item(seed, SyntheticTask::Images, i, cfg.image_size) {
            let g = patchify(&image, cfg.patch_size)?;
            dim = g.patch_dim();
            patches.extend_from_slice(&g.patches);
        }
    }
    train_codebook(&patches, dim, cfg.codebook_size, cfg.codebook_iters, seed)
}

fn image_of(s: Sample) -> RawImage {
    match s {
        Sample::Image { image } | Sample::Pair { image, .. } => image,
        _ => unreachable!("image task yields images"),
    }
}

/// Training batch of update `step` (1-based): items `(step−1)·n .. step·n` of
/// the image, text, and pair streams.
pub fn pretrain_batch(cfg: &Config, vocab: &Vocab, cb: Option<&Codebook>, step: u64) -> Result<Batch> {
    stream_batch(cfg, vocab, cb, step - 1, false)
}

/// A fixed batch from the held-out index range.
pub fn held_out_batch(cfg: &Config, vocab: &Vocab, cb: Option<&Codebook>, index: u64) -> Result<Batch> {
    stream_batch(cfg, vocab, cb, index, true)
}

fn stream_batch(cfg: &Config, vocab: &Vocab, cb: Option<&Codebook>, batch: u64, held_out: bool) -> Result<Batch> {
    let off = if held_out { HELD_OUT } else { 0 };
    let mut b = Batch::default();
    let n = cfg.batch_images as u64;
    let at = |j: usize, n: u64| off + batch * n + j as u64;
    for j in 0..cfg.batch_images {
        let img = image_of(generate_item(cfg.seed, SyntheticTask::Images, at(j, n), cfg.image_size));
        b.images.push(image_example(&img, cfg, cb)?);
    }
    for j in 0..cfg.batch_texts {
        if let Sample::Text { text } = generate_item(cfg.seed, SyntheticTask::Texts, at(j, cfg.batch_texts as u64), cfg.image_size) {
            b.texts.push(text_tokens(&text, cfg, vocab));
        }
    }
    for j in 0..cfg.batch_pairs {
        if let Sample::Pair { image, caption } = generate_item(cfg.seed, SyntheticTask::Pairs, at(j, cfg.batch_pairs as u64), cfg.image_size) {
            b.pairs.push(PairExample {
                image: image_example(&image, cfg, cb)?,
                text: text_tokens(&caption, cfg, vocab),
            });
        }
    }
    Ok(b)
}

/// Fresh model and optimizer for `cfg`, tokenizer included when a task needs it.
pub fn init_pretrainer(cfg: &Config) -> Result<Pretrainer> {
    let vocab = Vocab::synthetic();
    let codebook = train_tokenizer(cfg)?.codebook;
    let model = MomeModel::new(cfg.model(vocab.size()), &mut stream_rng(cfg.seed, Stream::Init))?;
    Pretrainer::new(model, Some(codebook), cfg.train())
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Records the effective configuration and seed in `out`.
pub fn write_run_header(cfg: &Config, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(out.join(SEED_FILE), format!("{}\n", cfg.seed))?;
    Ok(())
}

/// Trains from scratch, or from `resume`, up to `stop_step` (or `steps`).
///
/// Writes `config.txt`, `seed.txt`, `metrics.tsv`, and `checkpoint.vlbt` into
/// `out`. `on_step` sees every report.
pub fn run_pretrain(
    cfg: &Config,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Pretrainer> {
    write_run_header(cfg, out)?;
    let vocab = Vocab::synthetic();
    let mut p = match resume {
        Some(path) => Pretrainer::load(path, cfg.model(vocab.size()), cfg.train())?,
        None => init_pretrainer(cfg)?,
    };
    let metrics = out.join(METRICS_FILE);
    if resume.is_none() || !metrics.exists() {
        fs::write(&metrics, "step\ttask\tloss\tacc\n")?;
    }
    let stop = if cfg.stop_step == 0 { cfg.steps } else { cfg.stop_step } as u64;
    if p.step() > stop {
        return Err(Error::Config(format!("checkpoint is at step {}, past stop step {stop}", p.step())));
    }
    while p.step() < stop {
        let step = p.step() + 1;
        let batch = pretrain_batch(cfg, &vocab, p.codebook.as_ref(), step)?;
        let report = p.train_step(&batch, cfg.seed)?;
        append(&metrics, &report.log_lines())?;
        on_step(&report);
    }
    p.save(&out.join(CHECKPOINT_FILE))?;
    Ok(p)
}

pub fn ft_config(cfg: &Config) -> FtConfig {
    FtConfig {
        steps: cfg.ft_steps,
        batch: cfg.ft_batch,
        peak_lr: cfg.ft_peak_lr,
        warmup: cfg.ft_warmup,
        adam: crate::pretrain::AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.ft_weight_decay,
        },
        drop_path: cfg.ft_drop_path,
        train_size: cfg.ft_train_size,
        eval_size: cfg.ft_eval_size,
        retrieval_size: cfg.retrieval_size,
        rerank_k: cfg.rerank_k,
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        max_text_len: cfg.max_text_len,
        train_seed: stream_seed(cfg.seed, Stream::Finetune),
        eval_seed: stream_seed(cfg.seed, Stream::Eval),
    }
}

/// Backbone and codebook of a checkpoint, or a fresh backbone without `init`.
pub fn load_backbone(cfg: &Config, init: Option<&Path>) -> Result<(MomeModel<f32>, Option<Codebook>)> {
    let mcfg = cfg.model(Vocab::synthetic().size());
    match init {
        Some(path) => {
            let parts = split_checkpoint(checkpoint::read(path)?)?;
            Ok((MomeModel::from_params(mcfg, parts.model)?, parts.codebook))
        }
        None => Ok((MomeModel::new(mcfg, &mut stream_rng(cfg.seed, Stream::Init))?, None)),
    }
}

/// Backbone, heads, and codebook of a finetuned model.
pub fn finetuned_tensors(f: &Finetuner, codebook: Option<&Codebook>) -> Vec<NamedTensor> {
    let mut out = store_tensors("", &f.model.params);
    out.extend(store_tensors("heads/", &f.heads.params));
    if let Some(cb) = codebook {
        out.extend(codebook_tensors(cb));
    }
    out
}

/// Finetunes `task` from `init` (or from scratch), then evaluates on
/// held-out data.
///
/// Writes `config.txt`, `seed.txt`, `metrics.tsv`, `checkpoint.vlbt`,
/// `eval.txt`, and `eval.tsv` into `out`.
pub fn run_finetune(
    cfg: &Config,
    task: FtTask,
    init: Option<&Path>,
    out: &Path,
    mut on_step: impl FnMut(&FtReport),
) -> Result<(Finetuner, EvalReport)> {
    write_run_header(cfg, out)?;
    let vocab = Vocab::synthetic();
    let (model, codebook) = load_backbone(cfg, init)?;
    let heads = Heads::new(task, cfg.width, cfg.embed_dim, &mut stream_rng(cfg.seed, Stream::HeadInit))?;
    let fc = ft_config(cfg);
    let mut f = Finetuner::new(model, heads, fc.clone())?;
    let train = train_examples(&fc, task, &vocab)?;
    let metrics = out.join(METRICS_FILE);
    fs::write(&metrics, "step\ttask\tloss\tacc\n")?;
    while (f.step() as usize) < fc.steps {
        let r = f.train_step(&train)?;
        append(&metrics, &format!("{}\t{task}\t{:.6}\t{:.4}\n", r.step, r.loss, r.accuracy()))?;
        on_step(&r);
    }
    checkpoint::write(&out.join(CHECKPOINT_FILE), &finetuned_tensors(&f, codebook.as_ref()))?;
    let report = f.evaluate(&eval_examples(&fc, task, &vocab)?)?;
    write_report(&report, f.step(), out)?;
    Ok((f, report))
}

fn write_report(report: &EvalReport, step: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(EVAL_FILE), report.lines())?;
    fs::write(out.join(SUMMARY_FILE), report.summary(step))?;
    Ok(())
}

/// Number of held-out batches averaged by [`eval_pretrained`].
pub const EVAL_BATCHES: u64 = 4;

/// Held-out losses and accuracies of every enabled pretraining task, plus
/// the masked-word accuracy of MVLM with the true image and with noise.
pub fn eval_pretrained(p: &Pretrainer, cfg: &Config) -> Result<EvalReport> {
    let vocab = Vocab::synthetic();
    let mut sums: Vec<(String, f64)> = Vec::new();
    let mut add = |name: String, v: f64| match sums.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 += v / EVAL_BATCHES as f64,
        None => sums.push((name, v / EVAL_BATCHES as f64)),
    };
    for b in 0..EVAL_BATCHES {
        let batch = held_out_batch(cfg, &vocab, p.codebook.as_ref(), b)?;
        let r = p.evaluate(&batch, stream_seed(cfg.seed, Stream::Eval) ^ b, false)?;
        for t in &r.tasks {
            add(format!("{}_loss", t.task), t.loss);
            add(format!("{}_acc", t.task), t.accuracy());
        }
        add("total_loss".into(), r.total);
    }
    let pairs = probe_pairs(cfg, &vocab, p.codebook.as_ref())?;
    let (with_image, with_noise) = cross_modal_probe(p, cfg, &pairs)?;
    add("probe_image_acc".into(), with_image * EVAL_BATCHES as f64);
    add("probe_noise_acc".into(), with_noise * EVAL_BATCHES as f64);
    Ok(EvalReport {
        task: "pretrain".into(),
        metrics: sums,
    })
}

/// Held-out caption pairs used by [`cross_modal_probe`].
pub fn probe_pairs(cfg: &Config, vocab: &Vocab, cb: Option<&Codebook>) -> Result<Vec<PairExample>> {
    (0..cfg.ft_eval_size as u64)
        .map(|i| match generate_item(cfg.seed, SyntheticTask::Pairs, HELD_OUT + (1 << 20) + i, cfg.image_size) {
            Sample::Pair { image, caption } => Ok(PairExample {
                image: image_example(&image, cfg, cb)?,
                text: text_tokens(&caption, cfg, vocab),
            }),
            _ => unreachable!("pair task yields pairs"),
        })
        .collect()
}

/// Masked-word accuracy on `pairs` with the true images and with noise
/// images, under identical text masks and no image masking.
pub fn cross_modal_probe(p: &Pretrainer, cfg: &Config, pairs: &[PairExample]) -> Result<(f64, f64)> {
    let mut mask = p.cfg.mask.clone();
    mask.mvlm_image_ratio = 0.0;
    mask.mvlm_text_actions = false;
    let mut noise_rng = stream_rng(cfg.seed, Stream::Eval);
    let noisy = pairs
        .iter()
        .map(|pe| {
            Ok(PairExample {
                image: image_example(&noise_image(&mut noise_rng, cfg.image_size), cfg, None)?,
                text: pe.text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = stream_seed(cfg.seed, Stream::Eval);
    let acc = |set: &[PairExample]| -> Result<f64> {
        let (mut c, mut t) = (0, 0);
        for (k, chunk) in set.chunks(32).enumerate() {
            let mut tape = Tape::<f32>::inference();
            let vars = p.model.bind(&mut tape);
            let ctx = LossContext {
                model: &p.model.cfg,
                vars: &vars,
                mask: &mask,
                training: false,
                mvlm_text_weight: 1.0,
                mvlm_image_weight: 1.0,
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ k as u64);
            let (_, st) = mvlm_loss(&mut tape, &ctx, chunk, &mut rng)?;
            if let Some(part) = st.text {
                c += part.correct;
                t += part.total;
            }
        }
        Ok(if t == 0 { 0.0 } else { c as f64 / t as f64 })
    };
    Ok((acc(pairs)?, acc(&noisy)?))
}

/// Evaluates a checkpoint: finetuned checkpoints on their task's held-out
/// set, pretraining checkpoints on held-out pretraining batches. Writes
/// `eval.txt` and `eval.tsv` into `out`.
pub fn run_eval(cfg: &Config, path: &Path, out: &Path) -> Result<EvalReport> {
    let vocab = Vocab::synthetic();
    let parts = split_checkpoint(checkpoint::read(path)?)?;
    let mcfg = cfg.model(vocab.size());
    let step = parts.opt_step.unwrap_or(0);
    let report = if parts.heads.is_empty() {
        let model = MomeModel::from_params(mcfg, parts.model)?;
        let p = Pretrainer::new(model, parts.codebook, cfg.train())?;
        eval_pretrained(&p, cfg)?
    } else {
        let model = MomeModel::from_params(mcfg, parts.model)?;
        let heads = Heads::from_params(cfg.width, parts.heads)?;
        let fc = ft_config(cfg);
        let task = heads.task;
        let f = Finetuner::new(model, heads, fc.clone())?;
        f.evaluate(&eval_examples(&fc, task, &vocab)?)?
    };
    write_report(&report, step, out)?;
    Ok(report)
}

/// Central-difference step of [`gradient_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Gradient check of the MVLM objective on a 2-block, width-16 model in
/// 64-bit precision, covering every parameter tensor.
///
/// Parameters are drawn uniformly from `[-0.5, 0.5]` (layer-norm gains from
/// `[0.5, 1.5]`) so the step `h` is small against every input scale.
pub fn gradient_check(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let vocab = Vocab::synthetic();
    let (size, patch) = (16, 4);
    let mcfg = MoMEConfig {
        layers: 2,
        width: 16,
        heads: 2,
        ffn_mult: 4,
        expert_set: ExpertSet::Mome,
        drop_path_rate: 0.0,
        max_text_len: 16,
        image_positions: 1 + (size / patch) * (size / patch),
        patch_dim: patch * patch * 3,
        text_vocab: vocab.size(),
        visual_vocab: 8,
        ln_eps: 1e-6,
    };
    let mut images = Vec::new();
    let mut patches = Vec::new();
    let mut captions = Vec::new();
    for i in 0..4 {
        if let Sample::Pair { image, caption } = generate_item(seed, SyntheticTask::Pairs, i, size) {
            let g = patchify(&image, patch)?;
            patches.extend_from_slice(&g.patches);
            images.push(g);
            captions.push(caption);
        }
    }
    let cb = train_codebook(&patches, patch * patch * 3, mcfg.visual_vocab, 5, seed)?.codebook;
    let pairs = images
        .into_iter()
        .zip(&captions)
        .take(2)
        .map(|(g, c)| {
            Ok(PairExample {
                text: tokenize(c, &vocab).truncated(mcfg.max_text_len - 2),
                image: ImageExample {
                    tokens: Some(quantize(&g, &cb)?),
                    grid: g,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = MaskConfig::new(vocab.size());
    let mut rng = stream_rng(seed, Stream::Init);
    let mut model = MomeModel::<f64>::new(mcfg.clone(), &mut rng)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let gain = model.params.name(id).ends_with("/g");
        for x in model.params.get_mut(id).data_mut() {
            let u: f64 = rng.random_range(-0.5..0.5);
            *x = if gain { 1.0 + u } else { u };
        }
    }
    let mut params = model.params.clone();
    grad_check(&mut params, GRAD_CHECK_STEP, tol, |tape, bound| {
        let vars = model.vars(bound.clone());
        let ctx = LossContext {
            model: &mcfg,
            vars: &vars,
            mask: &mask,
            training: false,
            mvlm_text_weight: 1.0,
            mvlm_image_weight: 1.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(mvlm_loss(tape, &ctx, &pairs, &mut rng)?.0)
    })
}

/// The task and backbone ablation grid: MVLM, MVLM+MIM, and MVLM+MIM+MLM,
/// each on the MoME and the standard backbone. Names are `<tasks>-<experts>`.
pub fn ablation_configs(base: &Config) -> Vec<(String, Config)> {
    let task_sets: [&[Task]; 3] = [&[Task::Mvlm], &[Task::Mim, Task::Mvlm], &[Task::Mlm, Task::Mim, Task::Mvlm]];
    let mut out = Vec::new();
    for experts in [ExpertSet::Mome, ExpertSet::Standard] {
        for tasks in task_sets {
            let mut c = base.clone();
            c.tasks = tasks.to_vec();
            c.experts = experts;
            let names: Vec<&str> = tasks.iter().rev().map(|t| t.name()).collect();
            out.push((format!("{}-{}", names.join("+"), experts.name()), c));
        }
    }
    out
}

pub const ABLATION_FILE: &str = "ablation.tsv";

/// Runs every ablation configuration end to end: pretraining, held-out
/// evaluation, and optionally a downstream finetune. Each run lives in
/// `out/<name>`; `out/ablation.tsv` collects `config<TAB>metric<TAB>value`.
pub fn run_ablation(
    base: &Config,
    out: &Path,
    downstream: Option<FtTask>,
    mut on_run: impl FnMut(&str, &EvalReport),
) -> Result<Vec<(String, EvalReport)>> {
    fs::create_dir_all(out)?;
    let mut table = String::from("config\tmetric\tvalue\n");
    let mut reports = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let dir = out.join(&name);
        let p = run_pretrain(&cfg, &dir, None, |_| {})?;
        let mut report = eval_pretrained(&p, &cfg)?;
        if let Some(task) = downstream {
            let (_, ft) = run_finetune(&cfg, task, Some(&dir.join(CHECKPOINT_FILE)), &dir.join(task.name()), |_| {})?;
            report
                .metrics
                .extend(ft.metrics.into_iter().map(|(m, v)| (format!("{task}_{m}"), v)));
        }
        write_report(&report, p.step(), &dir)?;
        for (m, v) in &report.metrics {
            table.push_str(&format!("{name}\t{m}\t{v:.6}\n"));
        }
        on_run(&name, &report);
        reports.push((name, report));
    }
    fs::write(out.join(ABLATION_FILE), table)?;
    Ok(reports)
}

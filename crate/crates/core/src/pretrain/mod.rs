//! Joint masked pretraining: losses, optimizer, schedule, and checkpoints.

pub mod checkpoint;
mod losses;
mod optim;

pub use losses::{argmax, mim_loss, mlm_loss, mvlm_loss, ImageExample, LossContext, PairExample, Part, Task, TaskStats};
pub use optim::{adam_step, lr_at_step, AdamConfig, AdamState};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{MoMEConfig, MomeModel};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::input::text::TextTokens;
use crate::masking::MaskConfig;
use crate::param::ParamStore;
use crate::tensor::{Real, Tape, Tensor};
use checkpoint::NamedTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_images: usize,
    pub batch_texts: usize,
    pub batch_pairs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub mask: MaskConfig,
    pub mvlm_text_weight: f64,
    pub mvlm_image_weight: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one pretraining task must be enabled".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }

    pub fn has(&self, t: Task) -> bool {
        self.tasks.contains(&t)
    }
}

/// One step's worth of examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub images: Vec<ImageExample>,
    pub texts: Vec<TextTokens>,
    pub pairs: Vec<PairExample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub tasks: Vec<TaskStats>,
}

impl StepReport {
    /// `step<TAB>task<TAB>loss<TAB>acc` lines, one per task plus the total.
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            s.push_str(&format!("{}\t{}\t{:.6}\t{:.4}\n", self.step, t.task, t.loss, t.accuracy()));
        }
        s.push_str(&format!("{}\ttotal\t{:.6}\t\n", self.step, self.total));
        s
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, step, task)`.
pub fn task_rng(seed: u64, step: u64, task: Task) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, step), task as u64 + 1))
}

/// Model, optimizer state, and frozen codebook of a pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: MomeModel<f32>,
    pub opt: AdamState<f32>,
    pub codebook: Option<Codebook>,
    pub cfg: TrainConfig,
}

/// Sum of the enabled task losses on one tape; returns the total and stats.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    ctx: &LossContext,
    tasks: &[Task],
    batch: &Batch,
    mask_seed: u64,
    step: u64,
) -> Result<(crate::tensor::Var, Vec<TaskStats>)> {
    let mut total = None;
    let mut stats = Vec::new();
    for &task in Task::ALL.iter().filter(|t| tasks.contains(t)) {
        let mut rng = task_rng(mask_seed, step, task);
        let (loss, st) = match task {
            Task::Mlm => mlm_loss(tape, ctx, &batch.texts, &mut rng)?,
            Task::Mim => mim_loss(tape, ctx, &batch.images, &mut rng)?,
            Task::Mvlm => mvlm_loss(tape, ctx, &batch.pairs, &mut rng)?,
        };
        if !st.loss.is_finite() {
            return Err(Error::Numeric(format!("{task} loss is {} at step {step}", st.loss)));
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
        stats.push(st);
    }
    let total = total.ok_or_else(|| Error::Config("no pretraining task enabled".into()))?;
    Ok((total, stats))
}

impl Pretrainer {
    pub fn new(model: MomeModel<f32>, codebook: Option<Codebook>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if codebook.as_ref().is_some_and(|cb| cb.k != model.cfg.visual_vocab) {
            return Err(Error::Config("codebook size differs from the image head".into()));
        }
        let opt = AdamState::new(&model.params);
        Ok(Self {
            model,
            opt,
            codebook,
            cfg,
        })
    }

    /// Number of optimizer updates applied so far.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn context<'a>(&'a self, vars: &'a crate::backbone::ModelVars, training: bool) -> LossContext<'a> {
        LossContext {
            model: &self.model.cfg,
            vars,
            mask: &self.cfg.mask,
            training,
            mvlm_text_weight: self.cfg.mvlm_text_weight,
            mvlm_image_weight: self.cfg.mvlm_image_weight,
        }
    }

    /// Losses without an update; masks drawn from `mask_seed` as in training.
    pub fn evaluate(&self, batch: &Batch, mask_seed: u64, training: bool) -> Result<StepReport> {
        let mut tape = Tape::inference();
        let vars = self.model.bind(&mut tape);
        let ctx = self.context(&vars, training);
        let step = self.opt.step + 1;
        let (total, tasks) = joint_loss(&mut tape, &ctx, &self.cfg.tasks, batch, mask_seed, step)?;
        Ok(StepReport {
            step,
            lr: 0.0,
            total: tape.scalar(total) as f64,
            tasks,
        })
    }

    /// Forward, one backward through the summed task losses, one Adam update.
    ///
    /// Masks and stochastic depth draw from `task_rng(mask_seed, step, task)`
    /// where `step` is the 1-based index of this update.
    pub fn train_step(&mut self, batch: &Batch, mask_seed: u64) -> Result<StepReport> {
        let step = self.opt.step + 1;
        self.model.params.zero_grad();
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let ctx = self.context(&vars, true);
        let (total, tasks) = joint_loss(&mut tape, &ctx, &self.cfg.tasks, batch, mask_seed, step)?;
        let total_value = tape.scalar(total) as f64;
        tape.backward(total)?;
        self.model.params.accumulate_grads(&tape, &vars.bound)?;
        drop(tape);
        let lr = lr_at_step(step as usize, self.cfg.peak_lr, self.cfg.warmup_steps, self.cfg.steps);
        adam_step(&mut self.model.params, &mut self.opt, lr, &self.cfg.adam)?;
        Ok(StepReport {
            step,
            lr,
            total: total_value,
            tasks,
        })
    }

    pub fn to_tensors(&self) -> Result<Vec<NamedTensor>> {
        if self.opt.step >= 1 << 24 {
            return Err(Error::Format("step counter exceeds the f32-exact range".into()));
        }
        let mut out = store_tensors("", &self.model.params);
        out.push(NamedTensor::new("opt/step", &[1], vec![self.opt.step as f32]));
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            out.push(NamedTensor::new(format!("opt/m/{name}"), t.shape(), self.opt.m[i].clone()));
            out.push(NamedTensor::new(format!("opt/v/{name}"), t.shape(), self.opt.v[i].clone()));
        }
        if let Some(cb) = &self.codebook {
            out.extend(codebook_tensors(cb));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_tensors()?)
    }

    /// Rebuilds a run from checkpoint tensors; fails without side effects on
    /// any missing, extra, or misshapen tensor.
    pub fn from_tensors(tensors: Vec<NamedTensor>, model_cfg: MoMEConfig, cfg: TrainConfig) -> Result<Self> {
        let parts = split_checkpoint(tensors)?;
        let model = MomeModel::from_params(model_cfg, parts.model)?;
        let mut opt = AdamState::new(&model.params);
        if let Some(step) = parts.opt_step {
            opt.step = step;
            for (i, (name, t)) in model.params.iter().enumerate() {
                let take = |kind: &str| -> Result<Vec<f32>> {
                    let key = format!("opt/{kind}/{name}");
                    let (shape, data) = parts
                        .opt
                        .iter()
                        .find(|(n, _, _)| *n == key)
                        .map(|(_, s, d)| (s.clone(), d.clone()))
                        .ok_or_else(|| Error::Format(format!("missing {key}")))?;
                    if shape != t.shape() {
                        return Err(Error::Format(format!("{key} has shape {shape:?}, expected {:?}", t.shape())));
                    }
                    Ok(data)
                };
                opt.m[i] = take("m")?;
                opt.v[i] = take("v")?;
            }
            if parts.opt.len() != 2 * model.params.len() {
                return Err(Error::Format("unexpected optimizer tensors".into()));
            }
        }
        let mut p = Self::new(model, parts.codebook, cfg)?;
        p.opt = opt;
        Ok(p)
    }

    pub fn load(path: &Path, model_cfg: MoMEConfig, cfg: TrainConfig) -> Result<Self> {
        Self::from_tensors(checkpoint::read(path)?, model_cfg, cfg)
    }
}

/// Parameters as checkpoint tensors, names prefixed by `prefix`.
pub fn store_tensors(prefix: &str, store: &ParamStore<f32>) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(n, t)| NamedTensor::new(format!("{prefix}{n}"), t.shape(), t.data().to_vec()))
        .collect()
}

pub fn codebook_tensors(cb: &Codebook) -> Vec<NamedTensor> {
    let fp: Vec<f32> = (0..4).map(|i| ((cb.trained_on >> (16 * i)) & 0xffff) as f32).collect();
    vec![
        NamedTensor::new("cb/centroids", &[cb.k, cb.dim], cb.centroids.clone()),
        NamedTensor::new("cb/trained_on", &[4], fp),
    ]
}

/// A checkpoint sorted into its parts.
#[derive(Debug, Default)]
pub struct CheckpointParts {
    pub model: ParamStore<f32>,
    pub heads: ParamStore<f32>,
    pub codebook: Option<Codebook>,
    pub opt_step: Option<u64>,
    pub opt: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Sorts tensors by prefix: `cb/` codebook, `opt/` optimizer, `heads/`
/// finetuning heads, everything else backbone. Decay flags follow the
/// naming convention of the model (weights `w*` and projections decay).
pub fn split_checkpoint(tensors: Vec<NamedTensor>) -> Result<CheckpointParts> {
    let mut parts = CheckpointParts::default();
    let mut centroids = None;
    let mut fingerprint = None;
    for t in tensors {
        if let Some(rest) = t.name.strip_prefix("cb/") {
            match rest {
                "centroids" => centroids = Some(t),
                "trained_on" => fingerprint = Some(t),
                _ => return Err(Error::Format(format!("unknown codebook tensor {}", t.name))),
            }
        } else if t.name == "opt/step" {
            if t.data.len() != 1 || t.data[0] < 0.0 || t.data[0].fract() != 0.0 {
                return Err(Error::Format("bad opt/step".into()));
            }
            parts.opt_step = Some(t.data[0] as u64);
        } else if t.name.starts_with("opt/") {
            parts.opt.push((t.name, t.shape, t.data));
        } else {
            let (store, name) = match t.name.strip_prefix("heads/") {
                Some(rest) => (&mut parts.heads, rest.to_string()),
                None => (&mut parts.model, t.name.clone()),
            };
            if store.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
            let decay = decays(&name);
            store.add(name, Tensor::new(&t.shape, t.data)?, decay);
        }
    }
    if parts.opt_step.is_none() && !parts.opt.is_empty() {
        return Err(Error::Format("optimizer moments without opt/step".into()));
    }
    parts.codebook = match (centroids, fingerprint) {
        (None, None) => None,
        (Some(c), Some(f)) => {
            if c.shape.len() != 2 || f.data.len() != 4 {
                return Err(Error::Format("bad codebook tensors".into()));
            }
            let fp = f.data.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | ((x as u64) << (16 * i)));
            Some(Codebook::new(c.shape[0], c.shape[1], c.data, fp).map_err(|e| Error::Format(e.to_string()))?)
        }
        _ => return Err(Error::Format("incomplete codebook".into())),
    };
    Ok(parts)
}

/// Weight-decay rule by parameter name: matrices named `w*` and the patch
/// projection decay; biases, norms, embeddings, and temperatures do not.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('/').next().unwrap_or(name);
    name == "embed/patch_proj" || (last.starts_with('w') && !name.starts_with("embed/"))
}

//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so an
//! empty file is a complete configuration. Unknown keys are rejected; a
//! repeated key keeps its last value and logs a warning.

use std::fmt::Display;
use std::str::FromStr;

use crate::backbone::{ExpertSet, MoMEConfig};
use crate::error::{Error, Result};
use crate::input::synthetic::DISTINCT_CAPTIONS;
use crate::masking::MaskConfig;
use crate::pretrain::{AdamConfig, Task, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub experts: ExpertSet,
    pub drop_path: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub ln_eps: f64,

    pub codebook_size: usize,
    pub codebook_images: usize,
    pub codebook_iters: usize,

    pub steps: usize,
    /// Stop after this many updates (0: run to `steps`); the schedule still
    /// spans `steps`.
    pub stop_step: usize,
    pub batch_images: usize,
    pub batch_texts: usize,
    pub batch_pairs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tasks: Vec<Task>,

    pub mlm_ratio: f64,
    pub mim_ratio: f64,
    pub mvlm_text_ratio: f64,
    pub mvlm_image_ratio: f64,
    pub mvlm_text_actions: bool,
    pub min_block_area: usize,
    pub min_aspect: f64,
    pub mvlm_text_weight: f64,
    pub mvlm_image_weight: f64,

    pub ft_steps: usize,
    pub ft_batch: usize,
    pub ft_peak_lr: f64,
    pub ft_warmup: usize,
    pub ft_weight_decay: f64,
    pub ft_drop_path: f64,
    pub ft_train_size: usize,
    pub ft_eval_size: usize,
    pub embed_dim: usize,
    pub rerank_k: usize,
    pub retrieval_size: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            experts: ExpertSet::Mome,
            drop_path: 0.1,
            image_size: 32,
            patch_size: 8,
            max_text_len: 16,
            ln_eps: 1e-6,
            codebook_size: 32,
            codebook_images: 256,
            codebook_iters: 20,
            steps: 2000,
            stop_step: 0,
            batch_images: 8,
            batch_texts: 8,
            batch_pairs: 8,
            peak_lr: 2e-3,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tasks: vec![Task::Mlm, Task::Mim, Task::Mvlm],
            mlm_ratio: 0.15,
            mim_ratio: 0.4,
            mvlm_text_ratio: 0.5,
            mvlm_image_ratio: 0.4,
            mvlm_text_actions: true,
            min_block_area: 4,
            min_aspect: 0.3,
            mvlm_text_weight: 1.0,
            mvlm_image_weight: 1.0,
            ft_steps: 3000,
            ft_batch: 32,
            ft_peak_lr: 5e-4,
            ft_warmup: 100,
            ft_weight_decay: 0.05,
            ft_drop_path: 0.0,
            ft_train_size: 16384,
            ft_eval_size: 256,
            embed_dim: 32,
            rerank_k: 8,
            retrieval_size: 64,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_experts(value: &str) -> Result<ExpertSet> {
    match value.to_ascii_lowercase().as_str() {
        "mome" => Ok(ExpertSet::Mome),
        "standard" => Ok(ExpertSet::Standard),
        _ => Err(Error::Config(format!("experts must be mome or standard, got {value:?}"))),
    }
}

fn parse_tasks(value: &str) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for part in value.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()) {
        let t: Task = part.parse()?;
        if !tasks.contains(&t) {
            tasks.push(t);
        }
    }
    if tasks.is_empty() {
        return Err(Error::Config("tasks must name at least one of mvlm, mim, mlm".into()));
    }
    tasks.sort();
    Ok(tasks)
}

fn show<V: Display>(v: V) -> String {
    v.to_string()
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            ($field:ident) => {
                self.$field = parse(key, value)?
            };
        }
        match key {
            "seed" => num!(seed),
            "layers" => num!(layers),
            "width" => num!(width),
            "heads" => num!(heads),
            "ffn_mult" => num!(ffn_mult),
            "experts" => self.experts = parse_experts(value)?,
            "drop_path" => num!(drop_path),
            "image_size" => num!(image_size),
            "patch_size" => num!(patch_size),
            "max_text_len" => num!(max_text_len),
            "ln_eps" => num!(ln_eps),
            "codebook_size" => num!(codebook_size),
            "codebook_images" => num!(codebook_images),
            "codebook_iters" => num!(codebook_iters),
            "steps" => num!(steps),
            "stop_step" => num!(stop_step),
            "batch_images" => num!(batch_images),
            "batch_texts" => num!(batch_texts),
            "batch_pairs" => num!(batch_pairs),
            "peak_lr" => num!(peak_lr),
            "warmup_steps" => num!(warmup_steps),
            "weight_decay" => num!(weight_decay),
            "beta1" => num!(beta1),
            "beta2" => num!(beta2),
            "adam_eps" => num!(adam_eps),
            "tasks" => self.tasks = parse_tasks(value)?,
            "mlm_ratio" => num!(mlm_ratio),
            "mim_ratio" => num!(mim_ratio),
            "mvlm_text_ratio" => num!(mvlm_text_ratio),
            "mvlm_image_ratio" => num!(mvlm_image_ratio),
            "mvlm_text_actions" => self.mvlm_text_actions = parse_bool(key, value)?,
            "min_block_area" => num!(min_block_area),
            "min_aspect" => num!(min_aspect),
            "mvlm_text_weight" => num!(mvlm_text_weight),
            "mvlm_image_weight" => num!(mvlm_image_weight),
            "ft_steps" => num!(ft_steps),
            "ft_batch" => num!(ft_batch),
            "ft_peak_lr" => num!(ft_peak_lr),
            "ft_warmup" => num!(ft_warmup),
            "ft_weight_decay" => num!(ft_weight_decay),
            "ft_drop_path" => num!(ft_drop_path),
            "ft_train_size" => num!(ft_train_size),
            "ft_eval_size" => num!(ft_eval_size),
            "embed_dim" => num!(embed_dim),
            "rerank_k" => num!(rerank_k),
            "retrieval_size" => num!(retrieval_size),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let experts = self.experts.name();
        vec![
            ("seed", show(self.seed)),
            ("layers", show(self.layers)),
            ("width", show(self.width)),
            ("heads", show(self.heads)),
            ("ffn_mult", show(self.ffn_mult)),
            ("experts", experts.to_string()),
            ("drop_path", show(self.drop_path)),
            ("image_size", show(self.image_size)),
            ("patch_size", show(self.patch_size)),
            ("max_text_len", show(self.max_text_len)),
            ("ln_eps", show(self.ln_eps)),
            ("codebook_size", show(self.codebook_size)),
            ("codebook_images", show(self.codebook_images)),
            ("codebook_iters", show(self.codebook_iters)),
            ("steps", show(self.steps)),
            ("stop_step", show(self.stop_step)),
            ("batch_images", show(self.batch_images)),
            ("batch_texts", show(self.batch_texts)),
            ("batch_pairs", show(self.batch_pairs)),
            ("peak_lr", show(self.peak_lr)),
            ("warmup_steps", show(self.warmup_steps)),
            ("weight_decay", show(self.weight_decay)),
            ("beta1", show(self.beta1)),
            ("beta2", show(self.beta2)),
            ("adam_eps", show(self.adam_eps)),
            ("tasks", tasks.join(",")),
            ("mlm_ratio", show(self.mlm_ratio)),
            ("mim_ratio", show(self.mim_ratio)),
            ("mvlm_text_ratio", show(self.mvlm_text_ratio)),
            ("mvlm_image_ratio", show(self.mvlm_image_ratio)),
            ("mvlm_text_actions", show(self.mvlm_text_actions)),
            ("min_block_area", show(self.min_block_area)),
            ("min_aspect", show(self.min_aspect)),
            ("mvlm_text_weight", show(self.mvlm_text_weight)),
            ("mvlm_image_weight", show(self.mvlm_image_weight)),
            ("ft_steps", show(self.ft_steps)),
            ("ft_batch", show(self.ft_batch)),
            ("ft_peak_lr", show(self.ft_peak_lr)),
            ("ft_warmup", show(self.ft_warmup)),
            ("ft_weight_decay", show(self.ft_weight_decay)),
            ("ft_drop_path", show(self.ft_drop_path)),
            ("ft_train_size", show(self.ft_train_size)),
            ("ft_eval_size", show(self.ft_eval_size)),
            ("embed_dim", show(self.embed_dim)),
            ("rerank_k", show(self.rerank_k)),
            ("retrieval_size", show(self.retrieval_size)),
        ]
    }

    /// The effective configuration in the input format; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses file contents, then applies `overrides` (`key=value`) in order.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
            if !seen.insert(key.to_string()) {
                log::warn!("config line {}: duplicate key {key}, last value wins", i + 1);
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        for (k, r) in [
            ("mlm_ratio", self.mlm_ratio),
            ("mim_ratio", self.mim_ratio),
            ("mvlm_text_ratio", self.mvlm_text_ratio),
            ("mvlm_image_ratio", self.mvlm_image_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{k} = {r} is outside [0, 1)")));
            }
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return Err(Error::Config("min_aspect must lie in (0, 1]".into()));
        }
        if self.embed_dim == 0 || self.embed_dim > self.width {
            return Err(Error::Config(format!("embed_dim must lie in 1..={}", self.width)));
        }
        if self.rerank_k == 0 {
            return Err(Error::Config("rerank_k must be positive".into()));
        }
        if self.retrieval_size < 2 || self.retrieval_size > DISTINCT_CAPTIONS {
            return Err(Error::Config(format!("retrieval_size must lie in 2..={DISTINCT_CAPTIONS}")));
        }
        if self.ft_batch < 2 {
            return Err(Error::Config("ft_batch must be at least 2".into()));
        }
        if self.ft_train_size == 0 || self.ft_eval_size == 0 {
            return Err(Error::Config("finetune set sizes must be positive".into()));
        }
        if self.ft_warmup > self.ft_steps {
            return Err(Error::Config("ft_warmup exceeds ft_steps".into()));
        }
        if !(0.0..1.0).contains(&self.ft_drop_path) {
            return Err(Error::Config("ft_drop_path must lie in [0, 1)".into()));
        }
        if self.stop_step > self.steps {
            return Err(Error::Config("stop_step exceeds steps".into()));
        }
        self.model(2).validate()?;
        self.train().validate()
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn model(&self, text_vocab: usize) -> MoMEConfig {
        MoMEConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            expert_set: self.experts,
            drop_path_rate: self.drop_path,
            max_text_len: self.max_text_len,
            image_positions: 1 + self.num_patches(),
            patch_dim: self.patch_size * self.patch_size * 3,
            text_vocab,
            visual_vocab: self.codebook_size,
            ln_eps: self.ln_eps,
        }
    }

    pub fn mask(&self, text_vocab: usize) -> MaskConfig {
        MaskConfig {
            mlm_ratio: self.mlm_ratio,
            mim_ratio: self.mim_ratio,
            mvlm_text_ratio: self.mvlm_text_ratio,
            mvlm_image_ratio: self.mvlm_image_ratio,
            mvlm_text_actions: self.mvlm_text_actions,
            min_block_area: self.min_block_area,
            min_aspect: self.min_aspect,
            vocab_size: text_vocab,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_images: self.batch_images,
            batch_texts: self.batch_texts,
            batch_pairs: self.batch_pairs,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            tasks: self.tasks.clone(),
            mask: self.mask(crate::input::text::Vocab::synthetic().size()),
            mvlm_text_weight: self.mvlm_text_weight,
            mvlm_image_weight: self.mvlm_image_weight,
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse_with("", &[]).unwrap(), Config::default());
    }

    #[test]
    fn parses_values() {
        let c = Config::parse_with("peak_lr = 2e-3\n# comment\n\nexperts = standard # trailing\n", &[]).unwrap();
        assert_eq!(c.peak_lr, 0.002);
        assert_eq!(c.experts, ExpertSet::Standard);
    }

    #[test]
    fn duplicate_last_wins_and_overrides_win() {
        let c = Config::parse_with("steps = 200\nsteps = 300\n", &["tasks=MVLM".into()]).unwrap();
        assert_eq!(c.steps, 300);
        assert_eq!(c.tasks, vec![Task::Mvlm]);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = Config::parse_with("steps = 10\nbogus = 1\n", &[]).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = Config::parse_with("steps 10\n", &[]).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let c = Config::parse_with("peak_lr = 0.1\ntasks = mim,mvlm\nmin_aspect = 0.3\n", &[]).unwrap();
        assert_eq!(Config::parse_with(&c.to_text(), &[]).unwrap(), c);
    }
}

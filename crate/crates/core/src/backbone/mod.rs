//! Mixture-of-modality-experts Transformer.
//!
//! Every block has one self-attention module shared by all positions and a
//! pool of feed-forward experts; each position is routed to the expert of its
//! modality.

mod block;

pub use block::{attention_sublayer, encode, ffn, mome_block, route_ffn, BatchLayout, Encoded};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::input::repr::{EmbeddingVars, Modality};
use crate::param::{Bound, ParamId, ParamStore};
use crate::tensor::{cast, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertSet {
    /// Separate vision and language FFNs.
    Mome,
    /// One FFN for every position.
    Standard,
}

impl ExpertSet {
    pub fn len(self) -> usize {
        match self {
            ExpertSet::Mome => 2,
            ExpertSet::Standard => 1,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertSet::Mome => "mome",
            ExpertSet::Standard => "standard",
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            ExpertSet::Mome => &["ffn_vision", "ffn_language"],
            ExpertSet::Standard => &["ffn_shared"],
        }
    }

    /// Index into [`ExpertSet::names`] serving `tag`.
    pub fn expert_for(self, tag: Modality) -> usize {
        match (self, tag) {
            (ExpertSet::Standard, _) => 0,
            (ExpertSet::Mome, Modality::Image) => 0,
            (ExpertSet::Mome, Modality::Text) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoMEConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub expert_set: ExpertSet,
    pub drop_path_rate: f64,
    /// Rows of the text position table (`[T_CLS]` and `[T_SEP]` included).
    pub max_text_len: usize,
    /// Rows of the image position table, `1 + N`.
    pub image_positions: usize,
    /// `P · P · C`.
    pub patch_dim: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub ln_eps: f64,
}

impl MoMEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("layers, width, heads, and ffn_mult must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate)));
        }
        if self.max_text_len < 2 || self.image_positions < 2 {
            return Err(Error::Config("position tables need at least 2 rows".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    /// Drop probability of layer `l`: `rate · l / (layers − 1)`.
    pub fn drop_prob(&self, l: usize) -> f64 {
        if self.layers <= 1 {
            0.0
        } else {
            self.drop_path_rate * l as f64 / (self.layers - 1) as f64
        }
    }

    /// Closed-form parameter count.
    pub fn census(&self) -> usize {
        let (d, f) = (self.width, self.ffn_width());
        let embeddings = self.text_vocab * d + self.max_text_len * d + self.patch_dim * d + 2 * d + self.image_positions * d;
        let attention = 4 * (d * d + d);
        let expert = 2 * d * f + f + d;
        let norms = 2 * 2 * d;
        let block = attention + self.expert_set.len() * expert + norms;
        let heads = d * self.text_vocab + self.text_vocab + d * self.visual_vocab + self.visual_vocab;
        embeddings + self.layers * block + 2 * d + heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub experts: Vec<FfnIds>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    text_tokens: ParamId,
    text_pos: ParamId,
    patch_proj: ParamId,
    image_cls: ParamId,
    image_mask: ParamId,
    image_pos: ParamId,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
    text_head: (ParamId, ParamId),
    image_head: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles of one block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub wq: (Var, Var),
    pub wk: (Var, Var),
    pub wv: (Var, Var),
    pub wo: (Var, Var),
    pub ln2: (Var, Var),
    pub experts: Vec<FfnVars>,
}

/// Tape handles of the whole model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub bound: Bound,
    pub embed: EmbeddingVars,
    pub blocks: Vec<BlockVars>,
    pub final_ln: (Var, Var),
    pub text_head: (Var, Var),
    pub image_head: (Var, Var),
}

/// Configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct MomeModel<T: Real> {
    pub cfg: MoMEConfig,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

/// `σ = 0.02` normal truncated to `±2σ`.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 0.04 {
            break cast(x);
        }
    })
}

impl<T: Real> MomeModel<T> {
    /// Fresh model: truncated-normal projections and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(cfg: MoMEConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.width, cfg.ffn_width());
        let mut p = ParamStore::new();
        let weight = |p: &mut ParamStore<T>, name: String, shape: &[usize], decay: bool, rng: &mut R| {
            p.add(name, trunc_normal(shape, rng), decay);
        };
        weight(&mut p, "embed/text_tokens".into(), &[cfg.text_vocab, d], false, rng);
        weight(&mut p, "embed/text_pos".into(), &[cfg.max_text_len, d], false, rng);
        weight(&mut p, "embed/patch_proj".into(), &[cfg.patch_dim, d], true, rng);
        weight(&mut p, "embed/image_cls".into(), &[1, d], false, rng);
        weight(&mut p, "embed/image_mask".into(), &[1, d], false, rng);
        weight(&mut p, "embed/image_pos".into(), &[cfg.image_positions, d], false, rng);
        let norm = |p: &mut ParamStore<T>, prefix: String| {
            p.add(format!("{prefix}/g"), Tensor::ones(&[d]), false);
            p.add(format!("{prefix}/b"), Tensor::zeros(&[d]), false);
        };
        for l in 0..cfg.layers {
            norm(&mut p, format!("block{l}/ln1"));
            for w in ["wq", "wk", "wv", "wo"] {
                weight(&mut p, format!("block{l}/attn/{w}"), &[d, d], true, rng);
                p.add(format!("block{l}/attn/b{}", &w[1..]), Tensor::zeros(&[d]), false);
            }
            norm(&mut p, format!("block{l}/ln2"));
            for e in cfg.expert_set.names() {
                weight(&mut p, format!("block{l}/{e}/w1"), &[d, f], true, rng);
                p.add(format!("block{l}/{e}/b1"), Tensor::zeros(&[f]), false);
                weight(&mut p, format!("block{l}/{e}/w2"), &[f, d], true, rng);
                p.add(format!("block{l}/{e}/b2"), Tensor::zeros(&[d]), false);
            }
        }
        norm(&mut p, "final_ln".into());
        weight(&mut p, "head/text/w".into(), &[d, cfg.text_vocab], true, rng);
        p.add("head/text/b", Tensor::zeros(&[cfg.text_vocab]), false);
        weight(&mut p, "head/image/w".into(), &[d, cfg.visual_vocab], true, rng);
        p.add("head/image/b", Tensor::zeros(&[cfg.visual_vocab]), false);
        Self::from_params(cfg, p)
    }

    /// Wraps an existing store, checking that every expected tensor is present
    /// with the right shape and that nothing else is.
    pub fn from_params(cfg: MoMEConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.width, cfg.ffn_width());
        let mut seen = 0;
        let mut get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::dim("parameter shape", params.get(id).shape(), shape));
            }
            seen += 1;
            Ok(id)
        };
        let mut pair = |prefix: String, a: &str, b: &str, sa: &[usize], sb: &[usize]| -> Result<(ParamId, ParamId)> {
            Ok((get(format!("{prefix}/{a}"), sa)?, get(format!("{prefix}/{b}"), sb)?))
        };
        let text_tokens = pair("embed".into(), "text_tokens", "text_pos", &[cfg.text_vocab, d], &[cfg.max_text_len, d])?;
        let patch = pair("embed".into(), "patch_proj", "image_cls", &[cfg.patch_dim, d], &[1, d])?;
        let image = pair("embed".into(), "image_mask", "image_pos", &[1, d], &[cfg.image_positions, d])?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let b = format!("block{l}");
            let ln1 = pair(format!("{b}/ln1"), "g", "b", &[d], &[d])?;
            let wq = pair(format!("{b}/attn"), "wq", "bq", &[d, d], &[d])?;
            let wk = pair(format!("{b}/attn"), "wk", "bk", &[d, d], &[d])?;
            let wv = pair(format!("{b}/attn"), "wv", "bv", &[d, d], &[d])?;
            let wo = pair(format!("{b}/attn"), "wo", "bo", &[d, d], &[d])?;
            let ln2 = pair(format!("{b}/ln2"), "g", "b", &[d], &[d])?;
            let mut experts = Vec::new();
            for e in cfg.expert_set.names() {
                let (w1, b1) = pair(format!("{b}/{e}"), "w1", "b1", &[d, f], &[f])?;
                let (w2, b2) = pair(format!("{b}/{e}"), "w2", "b2", &[f, d], &[d])?;
                experts.push(FfnIds { w1, b1, w2, b2 });
            }
            blocks.push(BlockIds {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                experts,
            });
        }
        let final_ln = pair("final_ln".into(), "g", "b", &[d], &[d])?;
        let text_head = pair("head/text".into(), "w", "b", &[d, cfg.text_vocab], &[cfg.text_vocab])?;
        let image_head = pair("head/image".into(), "w", "b", &[d, cfg.visual_vocab], &[cfg.visual_vocab])?;
        if seen != params.len() {
            let extra: Vec<&str> = params
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !is_model_param(n, &cfg))
                .collect();
            return Err(Error::Config(format!("unexpected parameters: {}", extra.join(", "))));
        }
        let ids = ModelIds {
            text_tokens: text_tokens.0,
            text_pos: text_tokens.1,
            patch_proj: patch.0,
            image_cls: patch.1,
            image_mask: image.0,
            image_pos: image.1,
            blocks,
            final_ln,
            text_head,
            image_head,
        };
        Ok(Self { cfg, params, ids })
    }

    pub fn block_ids(&self, l: usize) -> &BlockIds {
        &self.ids.blocks[l]
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        self.vars(self.params.bind(tape))
    }

    /// Named handles of a store bound in this model's order.
    pub fn vars(&self, bound: Bound) -> ModelVars {
        let v = |id: ParamId| bound.var(id);
        let p = |(a, b): (ParamId, ParamId)| (bound.var(a), bound.var(b));
        let ids = &self.ids;
        ModelVars {
            embed: EmbeddingVars {
                text_tokens: v(ids.text_tokens),
                text_pos: v(ids.text_pos),
                patch_proj: v(ids.patch_proj),
                image_cls: v(ids.image_cls),
                image_mask: v(ids.image_mask),
                image_pos: v(ids.image_pos),
            },
            blocks: ids
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1: p(b.ln1),
                    wq: p(b.wq),
                    wk: p(b.wk),
                    wv: p(b.wv),
                    wo: p(b.wo),
                    ln2: p(b.ln2),
                    experts: b
                        .experts
                        .iter()
                        .map(|e| FfnVars {
                            w1: v(e.w1),
                            b1: v(e.b1),
                            w2: v(e.w2),
                            b2: v(e.b2),
                        })
                        .collect(),
                })
                .collect(),
            final_ln: p(ids.final_ln),
            text_head: p(ids.text_head),
            image_head: p(ids.image_head),
            bound,
        }
    }

    /// Same weights in another precision.
    pub fn convert<U: Real>(&self) -> MomeModel<U> {
        MomeModel {
            cfg: self.cfg.clone(),
            params: self.params.convert(),
            ids: self.ids.clone(),
        }
    }
}

fn is_model_param(name: &str, cfg: &MoMEConfig) -> bool {
    if name.starts_with("embed/") || name.starts_with("final_ln/") || name.starts_with("head/") {
        return true;
    }
    name.strip_prefix("block")
        .and_then(|r| r.split('/').next())
        .and_then(|l| l.parse::<usize>().ok())
        .is_some_and(|l| l < cfg.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(expert_set: ExpertSet) -> MoMEConfig {
        MoMEConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            expert_set,
            drop_path_rate: 0.0,
            max_text_len: 8,
            image_positions: 5,
            patch_dim: 12,
            text_vocab: 270,
            visual_vocab: 6,
            ln_eps: 1e-6,
        }
    }

    #[test]
    fn census_matches_store() {
        for e in [ExpertSet::Mome, ExpertSet::Standard] {
            let m = MomeModel::<f32>::new(tiny(e), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.params.numel(), m.cfg.census());
        }
    }

    #[test]
    fn init_is_truncated() {
        let m = MomeModel::<f32>::new(tiny(ExpertSet::Mome), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = m.params.get(m.params.id("block0/attn/wq").unwrap());
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
        let g = m.params.get(m.params.id("block1/ln2/g").unwrap());
        assert!(g.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bad_width_rejected() {
        let mut cfg = tiny(ExpertSet::Mome);
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_param_rejected() {
        let cfg = tiny(ExpertSet::Mome);
        let m = MomeModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut other = tiny(ExpertSet::Standard);
        other.text_vocab = cfg.text_vocab;
        assert!(MomeModel::from_params(other, m.params.clone()).is_err());
    }
}

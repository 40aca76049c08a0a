//! Finetuning heads and the downstream forward passes: fusion classification,
//! two-pair reasoning, dual-encoder retrieval with ITM reranking, and
//! average-pooled image classification.

mod retrieval;
mod train;

pub use retrieval::{
    cosine_top_k, hard_negative_probs, itc_loss, rerank, recall_at_k, sample_hard_negative, Direction,
    RetrievalIndex,
};
pub use train::{eval_examples, label, train_examples, EvalReport, FtConfig, FtExample, FtReport, Finetuner};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{encode, trunc_normal, MoMEConfig, ModelVars};
use crate::error::{Error, Result};
use crate::input::image::PatchGrid;
use crate::input::repr::{build_image_repr, build_text_repr, concat_pair, InputRepr};
use crate::input::synthetic::{IMGCLS_CLASSES, VQA_ANSWERS};
use crate::input::text::TextTokens;
use crate::param::{Bound, ParamStore};
use crate::pretrain::decays;
use crate::tensor::{cast, Real, Tape, Tensor, Var};

/// Initial contrastive scale `1/0.07`, stored as its logarithm.
pub const INIT_LOG_SCALE: f64 = 2.659_260_036_932_778;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FtTask {
    Vqa,
    Nlvr,
    Retrieval,
    ImgCls,
}

impl FtTask {
    pub const ALL: [FtTask; 4] = [FtTask::Vqa, FtTask::Nlvr, FtTask::Retrieval, FtTask::ImgCls];

    pub fn name(self) -> &'static str {
        match self {
            FtTask::Vqa => "vqa",
            FtTask::Nlvr => "nlvr",
            FtTask::Retrieval => "retrieval",
            FtTask::ImgCls => "imgcls",
        }
    }

    /// Prefix of the task's head parameters.
    fn head_prefix(self) -> &'static str {
        match self {
            FtTask::Vqa => "cls/",
            FtTask::Nlvr => "nlvr/",
            FtTask::Retrieval => "itm/",
            FtTask::ImgCls => "imgcls/",
        }
    }
}

impl fmt::Display for FtTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FtTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FtTask::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Usage(format!("unknown finetune task {s:?}")))
    }
}

/// Task heads on top of the backbone.
///
/// VQA: `cls` (d → answers). NLVR: `nlvr` (2d → 2). Retrieval: `itm`
/// (d → 2), `img_proj` and `txt_proj` (d → d_e), and the contrastive scale
/// `itc/log_scale`. Image classification: `imgcls` (d → classes).
#[derive(Clone, Debug)]
pub struct Heads<T: Real> {
    pub task: FtTask,
    pub width: usize,
    pub embed_dim: usize,
    pub params: ParamStore<T>,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub bound: Bound,
    pub cls: Option<(Var, Var)>,
    pub nlvr: Option<(Var, Var)>,
    pub itm: Option<(Var, Var)>,
    pub img_proj: Option<(Var, Var)>,
    pub txt_proj: Option<(Var, Var)>,
    pub log_scale: Option<Var>,
    pub imgcls: Option<(Var, Var)>,
}

fn shapes(task: FtTask, d: usize, de: usize) -> Vec<(&'static str, Vec<usize>)> {
    let linear = |w: &'static str, b: &'static str, i: usize, o: usize| vec![(w, vec![i, o]), (b, vec![o])];
    match task {
        FtTask::Vqa => linear("cls/w", "cls/b", d, VQA_ANSWERS.len()),
        FtTask::Nlvr => linear("nlvr/w", "nlvr/b", 2 * d, 2),
        FtTask::ImgCls => linear("imgcls/w", "imgcls/b", d, IMGCLS_CLASSES),
        FtTask::Retrieval => {
            let mut v = linear("itm/w", "itm/b", d, 2);
            v.extend(linear("img_proj/w", "img_proj/b", d, de));
            v.extend(linear("txt_proj/w", "txt_proj/b", d, de));
            v.push(("itc/log_scale", vec![1]));
            v
        }
    }
}

impl<T: Real> Heads<T> {
    /// Fresh heads: truncated-normal weights, zero biases, scale `1/0.07`.
    pub fn new<R: Rng + ?Sized>(task: FtTask, width: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 || embed_dim > width {
            return Err(Error::Config(format!("embed_dim {embed_dim} must lie in 1..={width}")));
        }
        let mut params = ParamStore::new();
        for (name, shape) in shapes(task, width, embed_dim) {
            let t = if name == "itc/log_scale" {
                Tensor::scalar(cast(INIT_LOG_SCALE))
            } else if name.ends_with("/w") {
                trunc_normal(&shape, rng)
            } else {
                Tensor::zeros(&shape)
            };
            params.add(name, t, decays(name));
        }
        Ok(Self {
            task,
            width,
            embed_dim,
            params,
        })
    }

    /// Wraps loaded head tensors; the task is read off the parameter names.
    pub fn from_params(width: usize, params: ParamStore<T>) -> Result<Self> {
        let task = FtTask::ALL
            .into_iter()
            .find(|t| params.iter().any(|(n, _)| n.starts_with(t.head_prefix())))
            .ok_or_else(|| Error::Format("checkpoint holds no finetuning heads".into()))?;
        let embed_dim = match params.id("img_proj/w") {
            Some(id) => params.get(id).shape()[1],
            None => 1,
        };
        let expected = shapes(task, width, embed_dim);
        if expected.len() != params.len() {
            return Err(Error::Format(format!("{task} heads expect {} tensors, found {}", expected.len(), params.len())));
        }
        for (name, shape) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing head tensor {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::dim("head shape", params.get(id).shape(), shape));
            }
        }
        Ok(Self {
            task,
            width,
            embed_dim,
            params,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> HeadVars {
        let bound = self.params.bind(tape);
        let var = |n: &str| self.params.id(n).map(|id| bound.var(id));
        let pair = |p: &str| Some((var(&format!("{p}/w"))?, var(&format!("{p}/b"))?));
        HeadVars {
            cls: pair("cls"),
            nlvr: pair("nlvr"),
            itm: pair("itm"),
            img_proj: pair("img_proj"),
            txt_proj: pair("txt_proj"),
            log_scale: var("itc/log_scale"),
            imgcls: pair("imgcls"),
            bound,
        }
    }

    pub fn convert<U: Real>(&self) -> Heads<U> {
        Heads {
            task: self.task,
            width: self.width,
            embed_dim: self.embed_dim,
            params: self.params.convert(),
        }
    }
}

fn need(h: Option<(Var, Var)>, what: &str) -> Result<(Var, Var)> {
    h.ok_or_else(|| Error::Contract(format!("{what} head is not present")))
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Backbone handles plus what the finetune forward passes need.
pub struct FtContext<'a> {
    pub model: &'a MoMEConfig,
    pub vars: &'a ModelVars,
    pub heads: &'a HeadVars,
    pub training: bool,
}

fn clip(t: &TextTokens, cfg: &MoMEConfig) -> TextTokens {
    t.truncated(cfg.max_text_len - 2)
}

/// Encodes image-text pairs and returns their `[T_CLS]` rows, `[b, d]`.
pub fn pair_cls<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    pairs: &[(&PatchGrid, &TextTokens)],
    rng: &mut R,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("fusion encoding of an empty batch".into()));
    }
    let mut reprs = Vec::with_capacity(pairs.len());
    for (g, t) in pairs {
        let tw = build_text_repr(tape, &ctx.vars.embed, &clip(t, ctx.model))?;
        let tv = build_image_repr(tape, &ctx.vars.embed, g)?;
        reprs.push(concat_pair(tape, &tw, &tv)?);
    }
    cls_rows(tape, ctx, &reprs, rng)
}

fn cls_rows<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    reprs: &[InputRepr],
    rng: &mut R,
) -> Result<Var> {
    let refs: Vec<&InputRepr> = reprs.iter().collect();
    let enc = encode(tape, ctx.model, ctx.vars, &refs, ctx.training, rng)?;
    let rows: Vec<usize> = reprs.iter().enumerate().map(|(i, r)| enc.row(i, r.cls_row())).collect();
    tape.gather_rows(enc.hidden, &rows)
}

/// VQA logits `[b, answers]` from the `[T_CLS]` vector of each pair.
pub fn fusion_classify<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    pairs: &[(&PatchGrid, &TextTokens)],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.cls, "cls")?;
    let h = pair_cls(tape, ctx, pairs, rng)?;
    linear(tape, h, head)
}

/// Concatenated `[T_CLS]` vectors of `(text, left)` and `(text, right)`, `[b, 2d]`.
pub fn nlvr_features<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    triples: &[(&PatchGrid, &PatchGrid, &TextTokens)],
    rng: &mut R,
) -> Result<Var> {
    let b = triples.len();
    let mut pairs: Vec<(&PatchGrid, &TextTokens)> = triples.iter().map(|(l, _, t)| (*l, *t)).collect();
    pairs.extend(triples.iter().map(|(_, r, t)| (*r, *t)));
    let h = pair_cls(tape, ctx, &pairs, rng)?;
    let left = tape.gather_rows(h, &(0..b).collect::<Vec<_>>())?;
    let right = tape.gather_rows(h, &(b..2 * b).collect::<Vec<_>>())?;
    tape.concat_cols(&[left, right])
}

/// NLVR logits `[b, 2]`; class 1 means the statement holds.
pub fn nlvr_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    triples: &[(&PatchGrid, &PatchGrid, &TextTokens)],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.nlvr, "nlvr")?;
    let h = nlvr_features(tape, ctx, triples, rng)?;
    linear(tape, h, head)
}

/// ITM logits `[b, 2]`; class 1 means the pair matches.
pub fn itm_logits<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    pairs: &[(&PatchGrid, &TextTokens)],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.itm, "itm")?;
    let h = pair_cls(tape, ctx, pairs, rng)?;
    linear(tape, h, head)
}

/// Row-wise mean of every encoded image, `[I_CLS]` included, `[b, d]`.
pub fn avgpool<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    images: &[&PatchGrid],
    rng: &mut R,
) -> Result<Var> {
    let reprs = images
        .iter()
        .map(|g| build_image_repr(tape, &ctx.vars.embed, g))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&InputRepr> = reprs.iter().collect();
    let enc = encode(tape, ctx.model, ctx.vars, &refs, ctx.training, rng)?;
    let rows = enc.layout.rows();
    let mut avg = vec![T::zero(); images.len() * rows];
    for (i, s) in enc.layout.segments.iter().enumerate() {
        let w: T = cast(1.0 / s.len as f64);
        avg[i * rows + s.start..i * rows + s.start + s.len].fill(w);
    }
    let a = tape.constant(&[images.len(), rows], avg)?;
    tape.matmul(a, enc.hidden)
}

/// Image classification logits `[b, classes]` from average-pooled features.
pub fn avgpool_classify<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    images: &[&PatchGrid],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.imgcls, "imgcls")?;
    let h = avgpool(tape, ctx, images, rng)?;
    linear(tape, h, head)
}

/// Unit-norm dual-encoder embeddings of images from their `[I_CLS]` rows.
pub fn embed_images<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    images: &[&PatchGrid],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.img_proj, "img_proj")?;
    let reprs = images
        .iter()
        .map(|g| build_image_repr(tape, &ctx.vars.embed, g))
        .collect::<Result<Vec<_>>>()?;
    let h = cls_rows(tape, ctx, &reprs, rng)?;
    let e = linear(tape, h, head)?;
    tape.l2_normalize_rows(e)
}

/// Unit-norm dual-encoder embeddings of texts from their `[T_CLS]` rows.
pub fn embed_texts<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &FtContext,
    texts: &[&TextTokens],
    rng: &mut R,
) -> Result<Var> {
    let head = need(ctx.heads.txt_proj, "txt_proj")?;
    let reprs = texts
        .iter()
        .map(|t| build_text_repr(tape, &ctx.vars.embed, &clip(t, ctx.model)))
        .collect::<Result<Vec<_>>>()?;
    let h = cls_rows(tape, ctx, &reprs, rng)?;
    let e = linear(tape, h, head)?;
    tape.l2_normalize_rows(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_shapes_and_task_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for task in FtTask::ALL {
            let h: Heads<f32> = Heads::new(task, 16, 8, &mut rng).unwrap();
            let back = Heads::from_params(16, h.params.clone()).unwrap();
            assert_eq!(back.task, task);
        }
        let r: Heads<f32> = Heads::new(FtTask::Retrieval, 16, 8, &mut rng).unwrap();
        let id = r.params.id("itc/log_scale").unwrap();
        assert!(!r.params.decays(id));
        assert!((r.params.get(id).data()[0] as f64 - (1.0f64 / 0.07).ln()).abs() < 1e-6);
    }

    #[test]
    fn embed_dim_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Heads::<f32>::new(FtTask::Retrieval, 8, 9, &mut rng).is_err());
    }

    #[test]
    fn task_names_parse() {
        for t in FtTask::ALL {
            assert_eq!(t.name().parse::<FtTask>().unwrap(), t);
        }
        assert!(matches!("coco".parse::<FtTask>(), Err(Error::Usage(_))));
    }
}

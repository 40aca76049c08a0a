//! Masked language, image, and vision-language modeling losses.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{encode, MoMEConfig, ModelVars};
use crate::error::{Error, Result};
use crate::input::image::PatchGrid;
use crate::input::repr::{build_image_repr, build_text_repr, concat_pair, InputRepr};
use crate::input::text::TextTokens;
use crate::masking::{apply_mask, plan_mim, plan_mlm, plan_mvlm, MaskConfig, MaskPlan};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Mlm,
    Mim,
    Mvlm,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mlm, Task::Mim, Task::Mvlm];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mlm => "mlm",
            Task::Mim => "mim",
            Task::Mvlm => "mvlm",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown pretraining task {s:?}")))
    }
}

/// A patchified image with its visual tokens, computed on the unmasked pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample {
    pub grid: PatchGrid,
    pub tokens: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub image: ImageExample,
    pub text: TextTokens,
}

/// Loss and prediction accuracy over one group of masked targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl Part {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    pub task: Task,
    /// Weighted loss that enters the total.
    pub loss: f64,
    pub text: Option<Part>,
    pub image: Option<Part>,
}

impl TaskStats {
    /// Accuracy pooled over the text and image targets.
    pub fn accuracy(&self) -> f64 {
        let parts = [self.text, self.image];
        let (c, t) = parts
            .iter()
            .flatten()
            .fold((0, 0), |(c, t), p| (c + p.correct, t + p.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }
}

/// Everything the losses read besides the examples.
pub struct LossContext<'a> {
    pub model: &'a MoMEConfig,
    pub vars: &'a ModelVars,
    pub mask: &'a MaskConfig,
    pub training: bool,
    pub mvlm_text_weight: f64,
    pub mvlm_image_weight: f64,
}

/// Linear head on selected hidden rows followed by cross-entropy.
fn head_loss<T: Real>(
    tape: &mut Tape<T>,
    hidden: Var,
    rows: &[usize],
    head: (Var, Var),
    targets: &[usize],
) -> Result<(Var, Part)> {
    let h = tape.gather_rows(hidden, rows)?;
    let logits = tape.matmul(h, head.0)?;
    let logits = tape.add_bias(logits, head.1)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let v = tape.shape(logits)[1];
    let correct = tape
        .value(logits)
        .chunks(v)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let part = Part {
        loss: tape.scalar(loss).to_f64().unwrap_or(f64::NAN),
        correct,
        total: targets.len(),
    };
    Ok((loss, part))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn text_table_words(cfg: &MoMEConfig) -> usize {
    cfg.max_text_len - 2
}

fn image_tokens(ex: &ImageExample) -> Result<&[usize]> {
    ex.tokens
        .as_deref()
        .ok_or_else(|| Error::Config("visual tokens need a trained codebook".into()))
}

/// `plan_mlm → apply_mask → encode → text head` on the masked positions.
pub fn mlm_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &LossContext,
    texts: &[TextTokens],
    rng: &mut R,
) -> Result<(Var, TaskStats)> {
    if texts.is_empty() {
        return Err(Error::Contract("mlm_loss on an empty batch".into()));
    }
    let mut reprs = Vec::with_capacity(texts.len());
    let mut plans = Vec::with_capacity(texts.len());
    for t in texts {
        let t = t.truncated(text_table_words(ctx.model));
        let plan = plan_mlm(&t, ctx.mask, rng);
        let repr = build_text_repr(tape, &ctx.vars.embed, &t)?;
        reprs.push(apply_mask(tape, &ctx.vars.embed, &repr, &plan)?);
        plans.push(plan);
    }
    let refs: Vec<&InputRepr> = reprs.iter().collect();
    let enc = encode(tape, ctx.model, ctx.vars, &refs, ctx.training, rng)?;
    let (rows, targets) = text_targets(&reprs, &plans, |i, r| enc.row(i, r));
    if targets.is_empty() {
        return Err(Error::Contract("mlm batch has no masked tokens".into()));
    }
    let (loss, part) = head_loss(tape, enc.hidden, &rows, ctx.vars.text_head, &targets)?;
    let stats = TaskStats {
        task: Task::Mlm,
        loss: part.loss,
        text: Some(part),
        image: None,
    };
    Ok((loss, stats))
}

fn text_targets(
    reprs: &[InputRepr],
    plans: &[MaskPlan],
    row: impl Fn(usize, usize) -> usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (r, p)) in reprs.iter().zip(plans).enumerate() {
        for t in &p.text {
            rows.push(row(i, r.text_offset + t.position));
            targets.push(t.original);
        }
    }
    (rows, targets)
}

fn image_targets(
    reprs: &[InputRepr],
    plans: &[MaskPlan],
    tokens: &[&[usize]],
    row: impl Fn(usize, usize) -> usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (r, p)) in reprs.iter().zip(plans).enumerate() {
        for &k in &p.image {
            rows.push(row(i, r.patch_row(k)));
            targets.push(tokens[i][k]);
        }
    }
    (rows, targets)
}

/// `quantize → plan_blockwise → apply_mask → encode → image head`.
pub fn mim_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &LossContext,
    images: &[ImageExample],
    rng: &mut R,
) -> Result<(Var, TaskStats)> {
    if images.is_empty() {
        return Err(Error::Contract("mim_loss on an empty batch".into()));
    }
    let tokens: Vec<&[usize]> = images.iter().map(image_tokens).collect::<Result<_>>()?;
    let mut reprs = Vec::with_capacity(images.len());
    let mut plans = Vec::with_capacity(images.len());
    for ex in images {
        let g = &ex.grid;
        let plan = plan_mim(g.n, g.grid_h, g.grid_w, ctx.mask, rng)?;
        let repr = build_image_repr(tape, &ctx.vars.embed, g)?;
        reprs.push(apply_mask(tape, &ctx.vars.embed, &repr, &plan)?);
        plans.push(plan);
    }
    let refs: Vec<&InputRepr> = reprs.iter().collect();
    let enc = encode(tape, ctx.model, ctx.vars, &refs, ctx.training, rng)?;
    let (rows, targets) = image_targets(&reprs, &plans, &tokens, |i, r| enc.row(i, r));
    if targets.is_empty() {
        return Err(Error::Contract("mim batch has no masked patches".into()));
    }
    let (loss, part) = head_loss(tape, enc.hidden, &rows, ctx.vars.image_head, &targets)?;
    let stats = TaskStats {
        task: Task::Mim,
        loss: part.loss,
        text: None,
        image: Some(part),
    };
    Ok((loss, stats))
}

/// Joint masking of image-text pairs; text and image cross-entropies are
/// weighted and summed.
pub fn mvlm_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    ctx: &LossContext,
    pairs: &[PairExample],
    rng: &mut R,
) -> Result<(Var, TaskStats)> {
    if pairs.is_empty() {
        return Err(Error::Contract("mvlm_loss on an empty batch".into()));
    }
    let need_tokens = ctx.mask.mvlm_image_ratio > 0.0;
    let tokens: Vec<&[usize]> = if need_tokens {
        pairs.iter().map(|p| image_tokens(&p.image)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut reprs = Vec::with_capacity(pairs.len());
    let mut plans = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t = p.text.truncated(text_table_words(ctx.model));
        let g = &p.image.grid;
        let plan = plan_mvlm(&t, g.n, g.grid_h, g.grid_w, ctx.mask, rng)?;
        let tw = build_text_repr(tape, &ctx.vars.embed, &t)?;
        let tv = build_image_repr(tape, &ctx.vars.embed, g)?;
        let pair = concat_pair(tape, &tw, &tv)?;
        reprs.push(apply_mask(tape, &ctx.vars.embed, &pair, &plan)?);
        plans.push(plan);
    }
    let refs: Vec<&InputRepr> = reprs.iter().collect();
    let enc = encode(tape, ctx.model, ctx.vars, &refs, ctx.training, rng)?;

    let mut terms = Vec::new();
    let mut total = 0.0;
    let (rows, targets) = text_targets(&reprs, &plans, |i, r| enc.row(i, r));
    let text = if targets.is_empty() {
        None
    } else {
        let (l, part) = head_loss(tape, enc.hidden, &rows, ctx.vars.text_head, &targets)?;
        terms.push(weighted(tape, l, ctx.mvlm_text_weight));
        total += ctx.mvlm_text_weight * part.loss;
        Some(part)
    };
    let image = if need_tokens {
        let (rows, targets) = image_targets(&reprs, &plans, &tokens, |i, r| enc.row(i, r));
        if targets.is_empty() {
            None
        } else {
            let (l, part) = head_loss(tape, enc.hidden, &rows, ctx.vars.image_head, &targets)?;
            terms.push(weighted(tape, l, ctx.mvlm_image_weight));
            total += ctx.mvlm_image_weight * part.loss;
            Some(part)
        }
    } else {
        None
    };
    let loss = match terms.as_slice() {
        [] => return Err(Error::Contract("mvlm batch has no masked targets".into())),
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    let stats = TaskStats {
        task: Task::Mvlm,
        loss: total,
        text,
        image,
    };
    Ok((loss, stats))
}

fn weighted<T: Real>(tape: &mut Tape<T>, loss: Var, w: f64) -> Var {
    if w == 1.0 {
        loss
    } else {
        tape.scale(loss, w)
    }
}

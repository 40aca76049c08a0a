use rand::Rng;

use super::{BlockVars, ExpertSet, FfnVars, MoMEConfig, ModelVars};
use crate::error::{Error, Result};
use crate::input::repr::{InputRepr, Modality};
use crate::tensor::{cast, Real, Segment, Tape, Var};

/// Row layout of a batch of sequences stacked into one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub segments: Vec<Segment>,
    pub tags: Vec<Modality>,
    pub valid: Vec<bool>,
}

impl BatchLayout {
    pub fn of(reprs: &[&InputRepr]) -> Self {
        let mut segments = Vec::with_capacity(reprs.len());
        let mut tags = Vec::new();
        let mut valid = Vec::new();
        for r in reprs {
            segments.push(Segment {
                start: tags.len(),
                len: r.len(),
            });
            tags.extend_from_slice(&r.tags);
            valid.extend_from_slice(&r.valid);
        }
        Self { segments, tags, valid }
    }

    pub fn rows(&self) -> usize {
        self.tags.len()
    }
}

/// Final hidden states of a batch, `[rows, d]`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub layout: BatchLayout,
}

impl Encoded {
    /// Stacked row of row `r` of example `i`.
    pub fn row(&self, i: usize, r: usize) -> usize {
        self.layout.segments[i].start + r
    }
}

/// `W_2 · gelu(W_1 · x + b_1) + b_2` applied to each row.
pub fn ffn<T: Real>(tape: &mut Tape<T>, e: &FfnVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, e.w1)?;
    let h = tape.add_bias(h, e.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, e.w2)?;
    tape.add_bias(o, e.b2)
}

/// Shared multi-head self-attention with output projection.
pub fn attention_sublayer<T: Real>(
    tape: &mut Tape<T>,
    b: &BlockVars,
    x: Var,
    segments: &[Segment],
    valid: &[bool],
    heads: usize,
) -> Result<Var> {
    let mut proj = |(w, bias): (Var, Var)| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, bias)
    };
    let q = proj(b.wq)?;
    let k = proj(b.wk)?;
    let v = proj(b.wv)?;
    let a = tape.attention(q, k, v, segments, valid, heads)?;
    let o = tape.matmul(a, b.wo.0)?;
    tape.add_bias(o, b.wo.1)
}

/// Applies to every row the FFN expert of its modality tag.
pub fn route_ffn<T: Real>(
    tape: &mut Tape<T>,
    experts: ExpertSet,
    b: &BlockVars,
    x: Var,
    tags: &[Modality],
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if tags.len() != rows {
        return Err(Error::dim("route_ffn", tape.shape(x), &[tags.len()]));
    }
    if b.experts.len() != experts.len() {
        return Err(Error::Config(format!(
            "block has {} experts, expert set needs {}",
            b.experts.len(),
            experts.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); experts.len()];
    for (r, &t) in tags.iter().enumerate() {
        groups[experts.expert_for(t)].push(r);
    }
    if let Some(e) = groups.iter().position(|g| g.len() == rows) {
        return ffn(tape, &b.experts[e], x);
    }
    let mut parts = Vec::new();
    for (e, rows_e) in groups.into_iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows_e)?;
        let ye = ffn(tape, &b.experts[e], xe)?;
        parts.push((ye, rows_e));
    }
    tape.scatter_rows(parts, rows)
}

fn drop_path<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    branch: Var,
    segments: &[Segment],
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !training || p <= 0.0 {
        return Ok(branch);
    }
    let rows = tape.shape(branch)[0];
    let mut scales = vec![T::zero(); rows];
    let kept: T = cast(1.0 / (1.0 - p));
    for s in segments {
        if rng.random::<f64>() >= p {
            scales[s.start..s.start + s.len].fill(kept);
        }
    }
    tape.scale_rows(branch, scales)
}

/// Pre-norm residual block with per-example stochastic depth.
#[allow(clippy::too_many_arguments)]
pub fn mome_block<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &MoMEConfig,
    b: &BlockVars,
    x: Var,
    layout: &BatchLayout,
    layer: usize,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let p = cfg.drop_prob(layer);
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1, cfg.ln_eps)?;
    let a = attention_sublayer(tape, b, h, &layout.segments, &layout.valid, cfg.heads)?;
    let a = drop_path(tape, a, &layout.segments, p, training, rng)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, b.ln2.0, b.ln2.1, cfg.ln_eps)?;
    let f = route_ffn(tape, cfg.expert_set, b, h, &layout.tags)?;
    let f = drop_path(tape, f, &layout.segments, p, training, rng)?;
    tape.add(x, f)
}

/// Runs a batch of input sequences through every block and the final norm.
///
/// Sequences are stacked row-wise; attention never crosses sequences.
pub fn encode<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &MoMEConfig,
    mv: &ModelVars,
    reprs: &[&InputRepr],
    training: bool,
    rng: &mut R,
) -> Result<Encoded> {
    if reprs.is_empty() {
        return Err(Error::Contract("encode of an empty batch".into()));
    }
    let layout = BatchLayout::of(reprs);
    let embeddings: Vec<Var> = reprs.iter().map(|r| r.embeddings).collect();
    let mut x = if embeddings.len() == 1 {
        embeddings[0]
    } else {
        tape.concat_rows(&embeddings)?
    };
    for (l, b) in mv.blocks.iter().enumerate() {
        x = mome_block(tape, cfg, b, x, &layout, l, training, rng)?;
    }
    let hidden = tape.layer_norm(x, mv.final_ln.0, mv.final_ln.1, cfg.ln_eps)?;
    Ok(Encoded { hidden, layout })
}

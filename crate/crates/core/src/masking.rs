//! Mask plans for masked language, image, and vision-language modeling, and
//! their application to embedded inputs.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::input::repr::{EmbeddingVars, InputRepr};
use crate::input::text::{TextTokens, NUM_SPECIALS, T_MASK};
use crate::tensor::{Real, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextAction {
    Mask,
    Random,
    Keep,
}

/// One corrupted text position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextMask {
    /// Row inside the text block, `1..=M` (row 0 is `[T_CLS]`).
    pub position: usize,
    pub action: TextAction,
    pub original: usize,
    /// Id embedded at this row: `T_MASK`, a random id, or `original`.
    pub replacement: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskPlan {
    /// Sorted by position.
    pub text: Vec<TextMask>,
    /// Sorted, unique patch indices in `[0, N)`.
    pub image: Vec<usize>,
    pub text_ratio: f64,
    pub image_ratio: f64,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty() && self.image.is_empty()
    }
}

/// Ratios and block-sampling parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub mlm_ratio: f64,
    pub mim_ratio: f64,
    pub mvlm_text_ratio: f64,
    pub mvlm_image_ratio: f64,
    /// Use MASK/RANDOM/KEEP for MVLM text; otherwise every position is MASK.
    pub mvlm_text_actions: bool,
    pub min_block_area: usize,
    pub min_aspect: f64,
    /// Text vocabulary size; RANDOM draws from `[NUM_SPECIALS, vocab_size)`.
    pub vocab_size: usize,
}

impl MaskConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            mlm_ratio: 0.15,
            mim_ratio: 0.4,
            mvlm_text_ratio: 0.5,
            mvlm_image_ratio: 0.4,
            mvlm_text_actions: true,
            min_block_area: 4,
            min_aspect: 0.3,
            vocab_size,
        }
    }
}

/// `max(1, floor(ratio·m))` for `m ≥ 1` and a positive ratio, else 0.
pub fn text_mask_count(m: usize, ratio: f64) -> usize {
    if m == 0 || ratio <= 0.0 {
        return 0;
    }
    ((ratio * m as f64 + 1e-9).floor() as usize).clamp(1, m)
}

/// `ceil(ratio·n)`, tolerant of ratios like 0.4 that are not exact in binary.
pub fn image_mask_target(n: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((ratio * n as f64 - 1e-9).ceil() as usize).min(n)
}

fn plan_text<R: Rng + ?Sized>(
    tokens: &TextTokens,
    ratio: f64,
    actions: bool,
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<TextMask>, f64) {
    let m = tokens.len();
    let count = text_mask_count(m, ratio);
    if count == 0 {
        return (Vec::new(), 0.0);
    }
    let mut picks = sample(rng, m, count).into_vec();
    picks.sort_unstable();
    let masks = picks
        .into_iter()
        .map(|i| {
            let original = tokens.ids[i];
            let action = if !actions {
                TextAction::Mask
            } else {
                let u: f64 = rng.random();
                if u < 0.8 {
                    TextAction::Mask
                } else if u < 0.9 {
                    TextAction::Random
                } else {
                    TextAction::Keep
                }
            };
            let replacement = match action {
                TextAction::Mask => T_MASK,
                TextAction::Random => rng.random_range(NUM_SPECIALS..vocab_size),
                TextAction::Keep => original,
            };
            TextMask {
                position: i + 1,
                action,
                original,
                replacement,
            }
        })
        .collect();
    (masks, count as f64 / m as f64)
}

/// Masked language modeling plan over the words of one text.
pub fn plan_mlm<R: Rng + ?Sized>(tokens: &TextTokens, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let (text, text_ratio) = plan_text(tokens, cfg.mlm_ratio, true, cfg.vocab_size, rng);
    MaskPlan {
        text,
        text_ratio,
        ..Default::default()
    }
}

fn sample_block<R: Rng + ?Sized>(
    rng: &mut R,
    gh: usize,
    gw: usize,
    min_area: usize,
    max_area: usize,
    min_aspect: f64,
) -> (usize, usize, usize, usize) {
    let lo = min_area.min(max_area) as f64;
    let hi = min_area.max(max_area) as f64;
    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let log_aspect = rng.random_range(min_aspect.ln()..=(1.0 / min_aspect).ln());
    let aspect = log_aspect.exp();
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
    let w = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
    let top = rng.random_range(0..=gh - h);
    let left = rng.random_range(0..=gw - w);
    (top, left, h, w)
}

/// Block-wise image masking on a `grid_h × grid_w` patch grid.
///
/// Rectangles with sampled area at least `min(min_block_area, N)` and aspect
/// ratio in `[min_aspect, 1/min_aspect]` are clipped to the grid and unioned
/// until `ceil(ratio·N)` patches are covered. Each round tries up to ten
/// rectangles that add between 1 and the remaining number of patches; if all
/// ten overshoot or add nothing, the next rectangle adding anything is taken.
pub fn plan_blockwise<R: Rng + ?Sized>(
    n: usize,
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    if grid_h * grid_w != n {
        return Err(Error::Contract(format!("grid {grid_h}x{grid_w} does not hold {n} patches")));
    }
    let target = image_mask_target(n, ratio);
    let min_area = cfg.min_block_area.min(n);
    let mut mask = vec![false; n];
    let mut count = 0;
    let cover = |mask: &mut [bool], (top, left, h, w): (usize, usize, usize, usize), apply: bool| {
        let mut new = 0;
        for y in top..top + h {
            for x in left..left + w {
                let cell = &mut mask[y * grid_w + x];
                if !*cell {
                    new += 1;
                    if apply {
                        *cell = true;
                    }
                }
            }
        }
        new
    };
    while count < target {
        let remaining = target - count;
        let mut added = 0;
        for _ in 0..10 {
            let block = sample_block(rng, grid_h, grid_w, min_area, remaining, cfg.min_aspect);
            let new = cover(&mut mask, block, false);
            if new > 0 && new <= remaining {
                added = cover(&mut mask, block, true);
                break;
            }
        }
        while added == 0 {
            let block = sample_block(rng, grid_h, grid_w, min_area, remaining, cfg.min_aspect);
            added = cover(&mut mask, block, true);
        }
        count += added;
    }
    let image: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    Ok(MaskPlan {
        image_ratio: image.len() as f64 / n.max(1) as f64,
        image,
        ..Default::default()
    })
}

/// Masked image modeling plan.
pub fn plan_mim<R: Rng + ?Sized>(n: usize, grid_h: usize, grid_w: usize, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    plan_blockwise(n, grid_h, grid_w, cfg.mim_ratio, cfg, rng)
}

/// Joint text and block-wise image plan for one image-text pair.
pub fn plan_mvlm<R: Rng + ?Sized>(
    tokens: &TextTokens,
    n: usize,
    grid_h: usize,
    grid_w: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    let (text, text_ratio) = plan_text(tokens, cfg.mvlm_text_ratio, cfg.mvlm_text_actions, cfg.vocab_size, rng);
    let img = plan_blockwise(n, grid_h, grid_w, cfg.mvlm_image_ratio, cfg, rng)?;
    Ok(MaskPlan {
        text,
        image: img.image,
        text_ratio,
        image_ratio: img.image_ratio,
    })
}

/// Re-embeds the planned rows of `repr`.
///
/// MASK and RANDOM text rows become `embed(replacement) + T_pos[row]`; masked
/// patches become `E_IMASK + V_pos[1 + i]`. KEEP rows and every unplanned row
/// are carried over unchanged.
pub fn apply_mask<T: Real>(
    tape: &mut Tape<T>,
    ev: &EmbeddingVars,
    repr: &InputRepr,
    plan: &MaskPlan,
) -> Result<InputRepr> {
    let word_rows = repr.text_len.saturating_sub(2);
    for t in &plan.text {
        if t.position == 0 || t.position > word_rows {
            return Err(Error::Contract(format!(
                "text mask position {} outside word rows 1..={word_rows}",
                t.position
            )));
        }
    }
    let patches = repr.image_len.saturating_sub(1);
    if let Some(&i) = plan.image.iter().find(|&&i| i >= patches) {
        return Err(Error::Contract(format!("patch index {i} outside 0..{patches}")));
    }
    let text: Vec<&TextMask> = plan.text.iter().filter(|t| t.action != TextAction::Keep).collect();
    if text.is_empty() && plan.image.is_empty() {
        return Ok(repr.clone());
    }

    let mut changed = vec![false; repr.len()];
    let mut parts = Vec::new();
    if !text.is_empty() {
        let ids: Vec<usize> = text.iter().map(|t| t.replacement).collect();
        let pos: Vec<usize> = text.iter().map(|t| t.position).collect();
        let words = tape.gather_rows(ev.text_tokens, &ids)?;
        let posv = tape.gather_rows(ev.text_pos, &pos)?;
        let rows = tape.add(words, posv)?;
        let targets: Vec<usize> = pos.iter().map(|&p| repr.text_offset + p).collect();
        for &r in &targets {
            changed[r] = true;
        }
        parts.push((rows, targets));
    }
    if !plan.image.is_empty() {
        let k = plan.image.len();
        let masks = tape.gather_rows(ev.image_mask, &vec![0; k])?;
        let pos: Vec<usize> = plan.image.iter().map(|&i| 1 + i).collect();
        let posv = tape.gather_rows(ev.image_pos, &pos)?;
        let rows = tape.add(masks, posv)?;
        let targets: Vec<usize> = plan.image.iter().map(|&i| repr.patch_row(i)).collect();
        for &r in &targets {
            changed[r] = true;
        }
        parts.push((rows, targets));
    }
    let kept: Vec<usize> = (0..repr.len()).filter(|&r| !changed[r]).collect();
    if !kept.is_empty() {
        let rows = tape.gather_rows(repr.embeddings, &kept)?;
        parts.push((rows, kept));
    }
    let mut out = repr.clone();
    out.embeddings = tape.scatter_rows(parts, repr.len())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(m: usize) -> TextTokens {
        TextTokens {
            ids: (0..m).map(|i| 300 + i % 20).collect(),
        }
    }

    #[test]
    fn mlm_counts() {
        let cfg = MaskConfig::new(293);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(plan_mlm(&tokens(20), &cfg, &mut rng).text.len(), 3);
        assert_eq!(plan_mlm(&tokens(1), &cfg, &mut rng).text.len(), 1);
        assert!(plan_mlm(&tokens(0), &cfg, &mut rng).is_empty());
    }

    #[test]
    fn mlm_never_touches_specials() {
        let cfg = MaskConfig::new(293);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in 1..30 {
            let p = plan_mlm(&tokens(m), &cfg, &mut rng);
            assert!(p.text.iter().all(|t| (1..=m).contains(&t.position)));
            for t in &p.text {
                if t.action == TextAction::Random {
                    assert!((NUM_SPECIALS..293).contains(&t.replacement));
                }
            }
        }
    }

    #[test]
    fn blockwise_reaches_target() {
        let cfg = MaskConfig::new(293);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = plan_blockwise(196, 14, 14, 0.4, &cfg, &mut rng).unwrap();
            assert!(p.image.len() >= 79);
            let p = plan_blockwise(16, 4, 4, 0.4, &cfg, &mut rng).unwrap();
            assert!(p.image.len() >= 7);
        }
    }

    #[test]
    fn mvlm_halves() {
        let cfg = MaskConfig::new(293);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = plan_mvlm(&tokens(8), 16, 4, 4, &cfg, &mut rng).unwrap();
        assert_eq!(p.text.len(), 4);
        assert!(p.image.len() >= 7);
    }

    #[test]
    fn target_arithmetic() {
        assert_eq!(image_mask_target(196, 0.4), 79);
        assert_eq!(image_mask_target(16, 0.4), 7);
        assert_eq!(image_mask_target(16, 0.0), 0);
        assert_eq!(text_mask_count(20, 0.15), 3);
        assert_eq!(text_mask_count(8, 0.5), 4);
    }
}

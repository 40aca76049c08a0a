#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vlbeit::backbone::{ExpertSet, MoMEConfig, MomeModel};
use vlbeit::input::synthetic::{Color, ShapeKind};
use vlbeit::input::RawImage;
use vlbeit::tensor::Real;

pub fn small(expert_set: ExpertSet) -> MoMEConfig {
    MoMEConfig {
        layers: 2,
        width: 16,
        heads: 2,
        ffn_mult: 4,
        expert_set,
        drop_path_rate: 0.0,
        max_text_len: 16,
        image_positions: 17,
        patch_dim: 8 * 8 * 3,
        text_vocab: 300,
        visual_vocab: 8,
        ln_eps: 1e-6,
    }
}

pub fn model<T: Real>(cfg: MoMEConfig, seed: u64) -> MomeModel<T> {
    MomeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// One object read back from pixels: quadrant, shape, and color.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seen {
    pub quadrant: usize,
    pub shape: ShapeKind,
    pub color: Color,
}

/// Recovers the objects of a rendered scene from its pixels alone.
///
/// Each quadrant holds at most one object. The color is the lit channel; the
/// shape follows from how much of its bounding box the object fills: a square
/// fills all of it, a circle about π/4, a triangle about half.
pub fn read_scene(img: &RawImage) -> Vec<Seen> {
    let half = img.height / 2;
    let mut out = Vec::new();
    for q in 0..4 {
        let (oy, ox) = ((q / 2) * half, (q % 2) * half);
        let mut lit = Vec::new();
        let mut channel = None;
        for y in oy..oy + half {
            for x in ox..ox + half {
                let p = img.pixel(y, x);
                if let Some(c) = p.iter().position(|&v| v > 0.5) {
                    lit.push((y, x));
                    assert!(channel.is_none_or(|k| k == c), "two colors in one quadrant");
                    channel = Some(c);
                }
            }
        }
        let Some(c) = channel else { continue };
        let (y0, y1) = (lit.iter().map(|p| p.0).min().unwrap(), lit.iter().map(|p| p.0).max().unwrap());
        let (x0, x1) = (lit.iter().map(|p| p.1).min().unwrap(), lit.iter().map(|p| p.1).max().unwrap());
        let fill = lit.len() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        let shape = if fill > 0.95 {
            ShapeKind::Square
        } else if fill > 0.65 {
            ShapeKind::Circle
        } else {
            ShapeKind::Triangle
        };
        let color = [Color::Red, Color::Green, Color::Blue][c];
        out.push(Seen { quadrant: q, shape, color });
    }
    out
}

/// One Adam update on `batch` with the masks of step 1 every time, so the
/// objective is a fixed function of the parameters. Returns the loss and
/// stats before the update.
pub fn fixed_mask_step(
    p: &mut vlbeit::pretrain::Pretrainer,
    batch: &vlbeit::pretrain::Batch,
    mask_seed: u64,
    lr: f64,
) -> vlbeit::Result<(f64, Vec<vlbeit::pretrain::TaskStats>)> {
    use vlbeit::pretrain::{adam_step, joint_loss, LossContext};
    use vlbeit::tensor::Tape;
    p.model.params.zero_grad();
    let mut tape = Tape::new();
    let vars = p.model.bind(&mut tape);
    let ctx = LossContext {
        model: &p.model.cfg,
        vars: &vars,
        mask: &p.cfg.mask,
        training: true,
        mvlm_text_weight: p.cfg.mvlm_text_weight,
        mvlm_image_weight: p.cfg.mvlm_image_weight,
    };
    let (total, stats) = joint_loss(&mut tape, &ctx, &p.cfg.tasks, batch, mask_seed, 1)?;
    let value = tape.scalar(total) as f64;
    tape.backward(total)?;
    p.model.params.accumulate_grads(&tape, &vars.bound)?;
    drop(tape);
    adam_step(&mut p.model.params, &mut p.opt, lr, &p.cfg.adam)?;
    Ok((value, stats))
}

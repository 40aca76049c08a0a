//! Adam with decoupled weight decay and the warmup-cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{cast, Real};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `steps`. Steps past `steps` give the final value.
pub fn lr_at_step(step: usize, peak: f64, warmup: usize, steps: usize) -> f64 {
    let s = step.min(steps);
    if s < warmup {
        return peak * s as f64 / warmup as f64;
    }
    if steps <= warmup {
        return peak;
    }
    let progress = (s - warmup) as f64 / (steps - warmup) as f64;
    (peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
///
/// Tensors flagged for decay are additionally shrunk by `lr · weight_decay · p`.
/// A tensor without a gradient is treated as having a zero gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2): (T, T) = (cast(cfg.beta1), cast(cfg.beta2));
    let (one_b1, one_b2): (T, T) = (cast(1.0 - cfg.beta1), cast(1.0 - cfg.beta2));
    let c1: T = cast(1.0 / (1.0 - cfg.beta1.powf(t)));
    let c2: T = cast(1.0 / (1.0 - cfg.beta2.powf(t)));
    let lr_t: T = cast(lr);
    let eps: T = cast(cfg.eps);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let decay: T = if params.decays(id) { cast(lr * cfg.weight_decay) } else { T::zero() };
        let tensor = params.get_mut(id);
        let n = tensor.numel();
        if state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Contract(format!("moment shape mismatch for tensor {i}")));
        }
        let grad: Vec<T> = tensor.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] * c1;
            let v_hat = v[j] * c2;
            *p = *p - decay * *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at_step(0, 2e-3, 100, 2000), 0.0);
        assert_eq!(lr_at_step(100, 2e-3, 100, 2000), 2e-3);
        assert!(lr_at_step(2000, 2e-3, 100, 2000).abs() <= 1e-12);
        assert_eq!(lr_at_step(5000, 2e-3, 100, 2000), lr_at_step(2000, 2e-3, 100, 2000));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::scalar(0.5), false);
        let mut st = AdamState::new(&p);
        p.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        adam_step(&mut p, &mut st, 1e-2, &AdamConfig::default()).unwrap();
        assert!((p.get(id).data()[0] - (0.5 - 1e-2)).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = ParamStore::<f32>::new();
        let id = p.add("w", Tensor::from_fn(&[3], |i| i as f32), true);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p.get(id).data(), &[0.0, 1.0, 2.0]);
    }
}

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// First and second moment accumulators keyed by parameter name.
pub struct OptimState<S> {
    moments: IndexMap<String, Moments<S>>,
    step: u64,
}

impl<S: Scalar> Default for OptimState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> OptimState<S> {
    pub fn new() -> Self {
        OptimState {
            moments: IndexMap::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }
}

/// One AdamW update over every parameter that carries a gradient.
///
/// Weight decay is decoupled: the parameter is shrunk by `1 - lr * wd`
/// before the bias-corrected Adam step is applied. Parameters without a
/// gradient (or with `requires_grad` off) are left untouched.
pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut OptimState<S>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(config_err!("learning rate must be positive, got {lr}"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let (one_b1, one_b2) = (S::of(1.0 - cfg.beta1), S::of(1.0 - cfg.beta2));
    let decay = S::of(1.0 - lr * cfg.weight_decay);
    let step_size = S::of(lr / bc1);
    let inv_bc2_sqrt = S::of(1.0 / bc2.sqrt());
    let eps = S::of(cfg.eps);

    for (name, p) in store.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        if grad.shape() != p.value.shape() {
            return Err(shape_err!("gradient shape mismatch for {name}"));
        }
        let mom = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![S::zero(); grad.numel()],
                v: vec![S::zero(); grad.numel()],
            });
        if mom.m.len() != grad.numel() {
            return Err(shape_err!("optimizer state shape mismatch for {name}"));
        }
        let values = p.value.data_mut();
        for (((w, &g), m), v) in values
            .iter_mut()
            .zip(grad.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *w = *w * decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let denom = v.sqrt() * inv_bc2_sqrt + eps;
            *w = *w - step_size * *m / denom;
        }
    }
    Ok(())
}

/// Tensor of squared gradient norm over all gradients, for diagnostics.
pub fn grad_norm<S: Scalar>(store: &ParamStore<S>) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(Tensor::data)
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[value]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = Some(Tensor::from_f64(&[1], &[grad]).unwrap());
        s
    }

    #[test]
    fn decay_only() {
        let mut s = one_param(1.0, 0.0);
        let mut st = OptimState::new();
        adamw_step(&mut s, &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert!((s.value("w").unwrap().item() - 0.995).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_normalized() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let mut s = one_param(0.0, g);
            let mut st = OptimState::new();
            adamw_step(&mut s, &mut st, 0.01, &cfg).unwrap();
            let expected = -0.01 * g / (g.abs() + cfg.eps);
            assert!((s.value("w").unwrap().item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut s = one_param(1.0, 1.0);
        let mut st = OptimState::new();
        assert!(adamw_step(&mut s, &mut st, 0.0, &AdamWConfig::default()).is_err());
        assert!(adamw_step(&mut s, &mut st, -1.0, &AdamWConfig::default()).is_err());
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn params_without_grad_untouched() {
        let mut s = one_param(1.0, 1.0);
        s.insert("frozen", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let mut st = OptimState::new();
        adamw_step(&mut s, &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(s.value("frozen").unwrap().item(), 2.0);
        assert_eq!(st.step(), 1);
    }
}

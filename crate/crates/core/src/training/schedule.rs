use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(config_err!(
                "need 0 <= min_lr <= base_lr and base_lr > 0, got {} / {}",
                self.min_lr,
                self.base_lr
            ));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(config_err!(
                "warmup {} must be shorter than {} total steps",
                self.warmup_steps,
                self.total_steps
            ));
        }
        Ok(())
    }
}

pub fn lr_at_step(step: usize, s: &LrSchedule) -> f64 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    let t = (step - s.warmup_steps) as f64 / span as f64;
    s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: LrSchedule = LrSchedule {
        base_lr: 1e-3,
        min_lr: 1e-5,
        warmup_steps: 10,
        total_steps: 100,
    };

    #[test]
    fn endpoints() {
        assert_eq!(lr_at_step(0, &S), 0.0);
        assert_eq!(lr_at_step(10, &S), 1e-3);
        assert!((lr_at_step(100, &S) - 1e-5).abs() < 1e-18);
        assert!((lr_at_step(5, &S) - 5e-4).abs() < 1e-18);
        let mid = lr_at_step(55, &S);
        assert!((mid - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn monotone_after_warmup() {
        let lrs: Vec<f64> = (10..=100).map(|k| lr_at_step(k, &S)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_rejected() {
        let mut s = S;
        s.warmup_steps = 100;
        assert!(s.validate().is_err());
        s = S;
        s.min_lr = 1.0;
        assert!(s.validate().is_err());
    }
}

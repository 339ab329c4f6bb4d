//! Adam with a per-epoch exponentially decayed learning rate.

use serde::{Deserialize, Serialize};

use super::layers::ParamRef;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate at epoch 0.
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: 1e-3,
            decay: 0.95,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// One bias-corrected Adam step for a single parameter array. `t` is the
/// 1-based step count after this update.
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr = T::from_f64_lossy(lr);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter using the gradients they hold.
    pub fn step(&mut self, params: Vec<ParamRef<'_, T>>, epoch: usize) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameter list"));
        }
        self.t += 1;
        let lr = self.cfg.lr_at(epoch);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.len() != p.value.len() || m.len() != p.value.len() {
                return Err(Error::shape(format!("{}: gradient/state length mismatch", p.name)));
            }
            adam_update(p.value, p.grad, m, v, self.t, lr, &self.cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param() {
        let cfg = AdamConfig::default();
        let mut p = [0.25f32, -3.0, 0.0];
        let (mut m, mut v) = ([0.0f32; 3], [0.0f32; 3]);
        for t in 1..=10 {
            adam_update(&mut p, &[0.0; 3], &mut m, &mut v, t, 1e-3, &cfg);
        }
        assert_eq!(p, [0.25, -3.0, 0.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg);
        // m_hat = v_hat = 1 => step = lr / (1 + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{}", p[0]);
        assert!((p[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let cfg = AdamConfig::default();
        let g = 0.3f64;
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[g], &mut m, &mut v, 1, 1e-3, &cfg);
        adam_update(&mut p, &[g], &mut m, &mut v, 2, 1e-3, &cfg);
        // hand iteration
        let (mut mm, mut vv, mut pp) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2 {
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            let mh = mm / (1.0 - 0.9f64.powi(t));
            let vh = vv / (1.0 - 0.999f64.powi(t));
            pp -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - pp).abs() < 1e-15);
        assert!((m[0] - mm).abs() < 1e-15 && (v[0] - vv).abs() < 1e-15);
    }

    #[test]
    fn decayed_learning_rate() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(2) - 1e-3 * 0.9025).abs() < 1e-15);
    }
}

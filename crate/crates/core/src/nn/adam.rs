use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub const DEFAULT_LR: f64 = 3e-4;

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    /// One update of `params` in place. A non-finite gradient leaves both
    /// parameters and state untouched and is reported as a training error.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        ensure!(params.len() == self.m.len() && grads.len() == params.len(), Dimension, "adam: parameter count mismatch");
        for (p, g) in params.iter().zip(grads) {
            ensure!(p.same_shape(g), Dimension, "adam: gradient shape {:?} vs {:?}", g.shape(), p.shape());
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pv = p.values_mut();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for k in 0..pv.len() {
                let gk = g.values()[k];
                mv[k] = self.beta1 * mv[k] + (1.0 - self.beta1) * gk;
                vv[k] = self.beta2 * vv[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = mv[k] / bc1;
                let vhat = vv[k] / bc2;
                pv[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `target <- rho * online + (1 - rho) * target`.
pub fn ema_update(target: &mut [Tensor], online: &[Tensor], rho: f64) -> Result<()> {
    ensure!(rho > 0.0 && rho <= 1.0, Contract, "EMA coefficient must lie in (0, 1], got {rho}");
    ensure!(target.len() == online.len(), Dimension, "EMA parameter count mismatch");
    for (t, o) in target.iter_mut().zip(online) {
        ensure!(t.same_shape(o), Dimension, "EMA shape {:?} vs {:?}", t.shape(), o.shape());
        for (tv, ov) in t.values_mut().iter_mut().zip(o.values()) {
            *tv = rho * ov + (1.0 - rho) * *tv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p, 0.1);
        s.step(&mut p, &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p[0].values(), &[1.0, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is
        // lr * 1 / (1 + 1e-8).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, 0.1);
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = AdamState::new(&p, 0.1);
        let r = s.step(&mut p, &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(r, Err(Error::Training(_))));
        assert_eq!(p[0].item(), 0.5);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = vec![Tensor::row(vec![0.3, 0.1])];
            let mut s = AdamState::new(&p, 0.01);
            for k in 0..5 {
                let g = Tensor::row(vec![k as f64 * 0.1, -0.2]);
                s.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ema_rules() {
        let online = vec![Tensor::scalar(1.0)];
        let mut t = vec![Tensor::scalar(0.0)];
        ema_update(&mut t, &online, 0.005).unwrap();
        assert_eq!(t[0].item(), 0.005);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t[0].item(), 1.0);
        assert!(ema_update(&mut t, &online, 0.0).is_err());
        assert!(ema_update(&mut t, &online, 1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let online = vec![Tensor::scalar(2.0)];
        let mut t = vec![Tensor::scalar(0.0)];
        for k in 1..=50 {
            ema_update(&mut t, &online, 0.1).unwrap();
            let expected_gap = 2.0 * 0.9f64.powi(k);
            assert!(((2.0 - t[0].item()) - expected_gap).abs() < 1e-12);
        }
    }
}

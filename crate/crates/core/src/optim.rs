//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads` are in store order. Moments are kept in 64-bit.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid("one gradient per parameter required".into()));
        }
        let mut clip = 1.0;
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                clip = max / norm;
            }
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (param, grad)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::shape("adam", param.shape(), grad.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64() * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                *p = T::lit(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_end` at step `total - 1`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_end: f64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_end + 0.5 * (lr0 - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

//! Bias-corrected adaptive-moment optimizer.

use super::matrix::Matrix;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moment accumulators plus the shared step count.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store
            .ids()
            .map(|id| {
                let p = store.get(id);
                Matrix::zeros(p.value.rows(), p.value.cols())
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter; frozen parameters are left
    /// bit-identical (their moments are not touched either).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Parameter(format!(
                "optimizer tracks {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for id in store.ids() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if p.grad.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), p.grad.shape()));
            }
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }

    /// Forget a specific parameter's moments (used when its trainable set
    /// changes meaning between stages).
    pub fn reset_moments(&mut self, id: ParamId) {
        self.m[id.0].fill(0.0);
        self.v[id.0].fill(0.0);
    }
}

//! Adam with cosine learning-rate decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, min_lr_ratio: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.0 }
    }
}

/// Learning rate at `step` of `total` under cosine decay.
pub fn cosine_lr(cfg: &AdamConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.lr;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + libm::cos(core::f64::consts::PI * p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let c = &self.config;
        let scale = if c.clip_norm > 0.0 {
            let norm = libm::sqrt(grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>());
            if norm > c.clip_norm {
                c.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / (libm::sqrt(*vi / bc2) + c.eps);
            }
        }
    }
}

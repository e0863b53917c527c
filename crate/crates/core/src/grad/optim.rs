use serde::{Deserialize, Serialize};

use super::{GradError, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
            min_lr_ratio: 1e-3,
        }
    }
}

/// Linear warm-up followed by cosine annealing to `min_lr_ratio * lr`.
pub fn cosine_lr(cfg: &AdamWConfig, step: usize, total_steps: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` from the store's gradients.
    /// Rejects the whole step, leaving parameters and moments untouched, if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), GradError> {
        for id in store.ids() {
            if !store.grad(id).all_finite() {
                return Err(GradError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids() {
            let g = store.grad(id).data().to_vec();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_mut(id).scale_assign(k);
        }
    }
    norm
}

//! Adam with decoupled weight decay, linear warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::dtmodel::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.25,
            batch_size: 64,
            steps: 5000,
            warmup_steps: 100,
        }
    }
}

impl OptConfig {
    /// Learning rate at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Optimizer state for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    cfg: OptConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: usize,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: OptConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update. `params[i]` pairs with `grads[i]`; `decay[i]` selects
    /// decoupled weight decay for that tensor.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>], decay: &[bool]) {
        assert_eq!(params.len(), self.m.len(), "tensor count changed");
        let lr = self.cfg.lr_at(self.t);
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step_size = F::of(lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(self.cfg.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decay[i] { F::of(1.0 - lr * self.cfg.weight_decay) } else { F::one() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1f * m[j] + one_b1 * gj;
                v[j] = b2f * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                p.data[j] = p.data[j] * shrink - step_size * m[j] / denom;
            }
        }
    }
}

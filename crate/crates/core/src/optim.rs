//! Adam with global-norm gradient clipping.
//!
//! The step is lazy: parameters whose gradient was never touched (or is
//! exactly zero) are skipped entirely, including their moment buffers.
//! This is required for the expert-isolation contract: an expert that took
//! no part in a batch must come out of the update bitwise unchanged, which
//! stock Adam would violate through stale momentum.

use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    pub cfg: AdamConfig,
    slots: HashMap<u64, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, slots: HashMap::new() }
    }

    /// Applies one update to every parameter with a live gradient and then
    /// clears those gradients. Returns the number of tensors updated.
    pub fn step(&mut self, params: &[Tensor]) -> usize {
        let mut updated = 0;
        for p in params {
            if !p.grad_touched() {
                continue;
            }
            let g = p.grad();
            if g.iter().all(|x| *x == 0.0) {
                p.zero_grad();
                continue;
            }
            let slot = self.slots.entry(p.id()).or_insert_with(|| Slot { step: 0, m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            slot.step += 1;
            let b1 = self.cfg.beta1;
            let b2 = self.cfg.beta2;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            p.with_data_mut(|data| {
                for i in 0..g.len() {
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = slot.m[i] / bc1;
                    let vhat = slot.v[i] / bc2;
                    data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                }
            });
            p.zero_grad();
            updated += 1;
        }
        updated
    }
}

/// Scales all live gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. Untouched (exactly-zero) gradients stay
/// untouched, preserving isolation.
pub fn clip_global_norm(params: &[Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: non-positive max_norm");
    let mut sq = 0.0;
    for p in params {
        if p.grad_touched() {
            p.with_grad(|g| {
                for x in g {
                    sq += x * x;
                }
            });
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params {
            if p.grad_touched() {
                p.scale_grad(scale);
            }
        }
    }
    norm
}

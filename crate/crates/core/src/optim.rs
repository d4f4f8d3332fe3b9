//! AdamW with decoupled weight decay, and the linear warmup/decay
//! learning-rate schedule.

use crate::params::ParamStore;
use crate::{Error, Result};

/// Default optimizer hyperparameters.
pub const BASE_LR: f64 = 1e-4;
pub const WEIGHT_DECAY: f64 = 1e-2;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW state: per-parameter first/second moments and the step counter.
/// Weight decay is decoupled: it shrinks the weights directly instead of
/// entering the gradient moments.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay,
            step: 0,
            first: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer sized for {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (pi, p) in store.iter_mut().enumerate() {
            let m = &mut self.first[pi];
            let v = &mut self.second[pi];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.value[i] -=
                    lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.value[i]);
            }
        }
        Ok(())
    }
}

/// Per-step linear ramp from 0 to the base rate over the warmup span,
/// then linear decay back to 0 at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn linear_warmup_decay(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = if total_steps == 0 {
            0
        } else {
            ((total_steps as f64 * warmup_fraction).round() as usize).max(1)
        };
        Self { base_lr, total_steps, warmup_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - 1 - self.warmup_steps).max(1) as f64;
        self.base_lr * (1.0 - (step - self.warmup_steps) as f64 / span)
    }
}

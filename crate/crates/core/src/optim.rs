//! Adam with an optional cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed steps.
    pub t: u64,
    /// First and second moments per parameter entry (empty for buffers).
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| if e.trainable { vec![0.0; e.tensor.len()] } else { Vec::new() }).collect();
        Self { beta1: cfg.beta1, beta2: cfg.beta2, epsilon: cfg.epsilon, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; parameters without a gradient are treated as having zero
    /// gradient so their moments still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!("optimizer tracks {} tensors, model has {}", self.m.len(), params.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let g = grads.grads.get(i).and_then(|g| g.as_deref());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = entry.tensor.data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

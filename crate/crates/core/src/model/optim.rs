use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParams};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1.0,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// `base · min(t · warmup^-1.5, t^-0.5)`; zero at `t = 0`.
///
/// The peak, reached at `t = warmup`, is `base / sqrt(warmup)`.
pub fn inverse_sqrt_lr(base: f64, warmup: u64, t: u64) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let t = t as f64;
    let w = warmup.max(1) as f64;
    base * (t * w.powf(-1.5)).min(t.powf(-0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
    /// Per-tensor flag; frozen tensors are never updated.
    pub frozen: Vec<bool>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ModelParams<R>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<R>> = params.tensors.iter().map(|t| vec![R::ZERO; t.data.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            frozen: vec![false; params.tensors.len()],
        }
    }

    pub fn freeze(&mut self, tensor: usize) {
        self.frozen[tensor] = true;
    }

    pub fn learning_rate(&self) -> f64 {
        inverse_sqrt_lr(self.config.base_lr, self.config.warmup, self.step)
    }

    /// Increments the step, then applies one bias-corrected Adam update
    /// scaled by the schedule at the new step.
    pub fn step(&mut self, params: &mut ModelParams<R>, grads: &Gradients<R>) -> Result<()> {
        if grads.tensors.len() != params.tensors.len() || self.m.len() != params.tensors.len() {
            return Err(Error::shape(params.tensors.len(), grads.tensors.len()));
        }
        for (i, (t, g)) in params.tensors.iter().zip(&grads.tensors).enumerate() {
            if t.data.len() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::shape(format!("{} of {}", t.data.len(), t.name), g.len()));
            }
        }
        self.step += 1;
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.learning_rate();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data.iter_mut().enumerate() {
                let g = grads.tensors[i][j].to_f64() * clip;
                let mj = c.beta1 * m[j].to_f64() + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j].to_f64() + (1.0 - c.beta2) * g * g;
                m[j] = R::from_f64(mj);
                v[j] = R::from_f64(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *w = R::from_f64(w.to_f64() - update);
            }
        }
        Ok(())
    }
}

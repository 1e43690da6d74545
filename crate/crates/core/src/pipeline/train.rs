use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grads, AdamConfig, AdamState, Example, ModelParams, Objective, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Runs `steps` optimizer updates on batches drawn by `next_batch`.
/// Returns the per-step loss trace; a non-finite loss aborts with the
/// trace so far.
pub(crate) fn run<R: Real, G: Rng>(
    params: &mut ModelParams<R>,
    opt: &mut AdamState<R>,
    steps: usize,
    objective: Objective,
    rng: &mut G,
    mut next_batch: impl FnMut(&mut G) -> Result<Vec<Example>>,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = next_batch(rng)?;
        let out = loss_and_grads(params, &batch, objective)?;
        if !out.loss.is_finite() || !out.grads.tensors.iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged {
                step,
                loss: out.loss,
                trace,
            });
        }
        opt.step(params, &out.grads)?;
        trace.push(out.loss);
    }
    Ok(trace)
}

/// Means over consecutive non-overlapping windows; a trailing partial
/// window is dropped unless it is the only one.
pub fn window_means(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    if trace.len() < window {
        if trace.is_empty() {
            return Vec::new();
        }
        return vec![trace.iter().sum::<f64>() / trace.len() as f64];
    }
    trace
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

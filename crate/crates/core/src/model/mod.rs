//! Toy transformer with hand-written gradients, Adam, and checkpoints.

mod checkpoint;
mod objective;
mod ops;
mod optim;
mod params;
mod real;
mod transformer;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use objective::{
    grad_check, lm_logits, loss, loss_and_grads, mimic_project, Example, GradCheckReport, LossOutput, Objective,
    Targets, GRAD_CHECK_MIN_COORDS,
};
pub use optim::{inverse_sqrt_lr, AdamConfig, AdamState};
pub use params::{Architecture, Gradients, ModelConfig, ModelParams, Precision, Tensor, INIT_STD};
pub use real::Real;
pub use transformer::{forward, forward_batch, ModelInput};

#[cfg(test)]
mod tests;

//! Model assembly, the cross-domain loss, optimization and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{AlphaMode, Fusion, LossConfig, ModelConfig, TrainConfig};
pub use loss::{cross_domain_loss, energy_alpha, loss_t, loss_tf, loss_total, LossParts};
pub use model::{DchtModel, DchtOutput, SPECTRAL_NAMESPACE, TEMPORAL_NAMESPACE};
pub use optim::{clip_gradients, global_norm, lr_schedule, Adam, Grads};
pub use train::{split_validation, train, ClipLoss, EpochLog, StepLog, TrainOutcome, TrainState, Trainer};

#[cfg(test)]
mod tests;

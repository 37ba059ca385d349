//! Pre-training distillation: the sparse KD loss, WSD schedule, optimizer,
//! training loop with checkpoints, weight averaging and validation loss.

mod config;
mod data;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use config::TrainConfig;
pub use data::{ChunkCycle, ChunkSource, ManifestSource, TrainItem};
pub use loss::{chunk_targets, loss_and_grad, sparse_kd_loss, validation_loss, validation_loss_with, StepResult};
pub use optim::{
    optimizer_step, register_optimizer, AdamWRule, OptimizerKind, OptimizerPlugin, OptimizerState,
    StepContext,
};
pub use schedule::{cosine_lr, wsd_lr};
pub use trainer::{
    check_compatible, train, weight_average, MetricsRow, TrainCheckpoint, TrainOutcome, Trainer,
    METRICS_HEADER,
};

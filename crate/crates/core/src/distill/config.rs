use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::distill::OptimizerKind;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_interval() -> u64 {
    100
}

/// Optimizer, schedule and loss-mix settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    /// Sequences per optimizer step.
    pub global_batch: usize,
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub decay_start_iter: u64,
    pub lr_min_ratio: f64,
    pub weight_decay: f64,
    /// Weight of the KL term; `1 - lambda_kd` goes to cross-entropy.
    pub lambda_kd: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Iterations between checkpoints; 0 disables them.
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    /// Iterations between metric rows (each with a validation loss).
    #[serde(default = "default_interval")]
    pub log_interval: u64,
}

impl TrainConfig {
    /// Warmup over the first 1% of iterations, decay over the last 20%,
    /// to 10% of the peak; 90/10 KL/CE mix.
    pub fn wsd(lr_peak: f64, global_batch: usize, total_iters: u64, seed: u64) -> Self {
        Self {
            lr_peak,
            global_batch,
            total_iters,
            warmup_iters: total_iters / 100,
            decay_start_iter: total_iters - total_iters / 5,
            lr_min_ratio: 0.1,
            weight_decay: 0.1,
            lambda_kd: 0.9,
            optimizer: OptimizerKind::AdamW,
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            checkpoint_interval: default_interval(),
            log_interval: default_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.warmup_iters <= self.decay_start_iter && self.decay_start_iter <= self.total_iters) {
            return bad("need warmup_iters <= decay_start_iter <= total_iters");
        }
        if !(0.0..=1.0).contains(&self.lambda_kd) {
            return bad("lambda_kd must lie in [0, 1]");
        }
        if !(self.lr_peak > 0.0) || !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return bad("lr_peak must be positive and lr_min_ratio in [0, 1]");
        }
        if self.global_batch == 0 {
            return bad("global_batch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be nonnegative and adam_eps positive");
        }
        Ok(())
    }

    /// Tokens consumed by a full run.
    pub fn token_budget(&self, chunk_len: usize) -> u64 {
        self.global_batch as u64 * chunk_len as u64 * self.total_iters
    }
}

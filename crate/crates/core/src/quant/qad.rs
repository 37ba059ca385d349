use std::sync::Arc;

use crate::distill::{cosine_lr, loss_and_grad, optimizer_step, ChunkSource, OptimizerKind, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::logitstore::teacher_records;
use crate::model::{ForwardOptions, ModelParams};
use crate::quant::{quantize_model, PtqMethod, QuantFormat, QuantizedModel, SteQuantizer};
use crate::scalar::Scalar;

/// Consecutive steps above twice the initial loss that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct QadConfig {
    pub steps: u64,
    pub lr: f64,
    /// Sequences per step.
    pub batch: usize,
    pub lambda_kd: f64,
    /// Teacher records kept per token when the data carries none.
    pub top_k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl QadConfig {
    pub fn new(steps: u64, lr: f64, batch: usize) -> Self {
        Self {
            steps,
            lr,
            batch,
            lambda_kd: 1.0,
            top_k: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    fn optimizer_config(&self) -> TrainConfig {
        TrainConfig {
            lr_peak: self.lr,
            global_batch: self.batch,
            total_iters: self.steps,
            warmup_iters: 0,
            decay_start_iter: 0,
            lr_min_ratio: 0.0,
            weight_decay: 0.0,
            lambda_kd: self.lambda_kd,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            checkpoint_interval: 0,
            log_interval: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QadOutcome<T> {
    /// Latent full-precision weights after recovery training.
    pub latent: ModelParams<T>,
    /// RTN of the latent weights: the deliverable.
    pub quantized: QuantizedModel,
    pub losses: Vec<f64>,
}

/// Quantization-aware distillation: trains the latent weights through a
/// straight-through weight quantizer against the teacher's top-K
/// distribution, with AdamW and a cosine decay to zero.
///
/// Items from `source` that carry stored teacher records use them; others
/// are labelled live by `teacher`.
pub fn qad<T: Scalar>(
    student: &ModelParams<T>,
    teacher: &ModelParams<T>,
    format: &QuantFormat,
    source: &mut dyn ChunkSource,
    cfg: &QadConfig,
) -> Result<QadOutcome<T>> {
    format.validate()?;
    if student.config.vocab != teacher.config.vocab {
        return Err(Error::Mismatch(format!(
            "student vocab {} vs teacher vocab {}",
            student.config.vocab, teacher.config.vocab
        )));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(0.0..=1.0).contains(&cfg.lambda_kd) {
        return Err(Error::InvalidArgument("QAD needs batch > 0, lr >= 0 and lambda in [0, 1]".into()));
    }
    let opt_cfg = cfg.optimizer_config();
    let quantizer = SteQuantizer::weights(*format);
    let opts = ForwardOptions {
        weight_quant: Some(Arc::new(quantizer)),
        act_quant: None,
    };
    let mut latent = student.clone();
    let mut state = OptimizerState::new(&latent, 2);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut above = 0usize;
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (chunk, records) = source.next_item()?;
            let records = match records {
                Some(r) => r,
                None => teacher_records(teacher, &chunk, cfg.top_k)?,
            };
            items.push((chunk, Some(records)));
        }
        let res = loss_and_grad(&latent, &items, cfg.lambda_kd, &opts)?;
        if !res.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: step });
        }
        let initial = *losses.first().unwrap_or(&res.loss);
        above = if res.loss > 2.0 * initial { above + 1 } else { 0 };
        losses.push(res.loss);
        if above >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged { step: step as usize });
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr, 0.0)?;
        optimizer_step(&mut latent, &res.grads, &mut state, &opt_cfg, lr, step)?;
    }
    let quantized = quantize_model(&latent, format, PtqMethod::Rtn, &[])?;
    Ok(QadOutcome {
        latent,
        quantized,
        losses,
    })
}

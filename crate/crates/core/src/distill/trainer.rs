use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{
    loss_and_grad, optimizer_step, validation_loss, wsd_lr, ChunkSource, ManifestSource,
    OptimizerState, TrainConfig,
};
use crate::error::{Error, Result};
use crate::logitstore::{ShardManifest, TokenChunk};
use crate::model::{
    build_model, read_params, write_params, ForwardOptions, ModelConfig, ModelParams,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const STATE_MAGIC: &[u8; 4] = b"KDTS";

/// Parameters and optimizer state after `iter` completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCheckpoint<T> {
    pub iter: u64,
    pub tokens_seen: u64,
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    iter: u64,
    tokens_seen: u64,
    step: u64,
    slots: usize,
}

impl<T: Scalar> TrainCheckpoint<T> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.iter == other.iter
            && self.tokens_seen == other.tokens_seen
            && self.params.bit_eq(&other.params)
            && self.optimizer.bit_eq(&other.optimizer)
    }

    /// A model checkpoint followed by a `KDTS` section holding the
    /// iteration counters and the optimizer slots (f32, declaration order).
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        write_params(&mut w, &self.params)?;
        let header = serde_json::to_vec(&StateHeader {
            iter: self.iter,
            tokens_seen: self.tokens_seen,
            step: self.optimizer.step,
            slots: self.optimizer.slots.len(),
        })?;
        w.write_all(STATE_MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for slot in &self.optimizer.slots {
            for (_, t) in slot.tensors() {
                let bytes: Vec<u8> = t.data().iter().flat_map(|x| (x.as_f64() as f32).to_le_bytes()).collect();
                w.write_all(&bytes).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "training checkpoint",
            detail: d.to_string(),
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let params: ModelParams<T> = read_params(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if rest.len() < 8 || &rest[..4] != STATE_MAGIC {
            return Err(bad("missing optimizer state section"));
        }
        let len = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        let header: StateHeader =
            serde_json::from_slice(rest.get(8..8 + len).ok_or_else(|| bad("short header"))?)?;
        let mut floats = rest[8 + len..]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64));
        let mut slots = Vec::with_capacity(header.slots);
        for _ in 0..header.slots {
            let tensors = params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::from_vec(t.shape(), floats.by_ref().take(t.len()).collect()))
                .collect::<Result<Vec<_>>>()
                .map_err(|_| bad("short optimizer section"))?;
            slots.push(ModelParams::from_tensors(params.config.clone(), tensors)?);
        }
        if floats.next().is_some() || rest[8 + len..].len() % 4 != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            iter: header.iter,
            tokens_seen: header.tokens_seen,
            params,
            optimizer: OptimizerState {
                step: header.step,
                slots,
            },
        })
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub kl_term: f64,
    pub ce_term: f64,
    pub val_loss: Option<f64>,
    pub tokens_seen: u64,
}

pub const METRICS_HEADER: &str = "iter,lr,train_loss,kl_term,ce_term,val_loss,tokens_seen";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let val = self.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        format!(
            "{},{:.9e},{:.9},{:.9},{:.9},{},{}",
            self.iter, self.lr, self.train_loss, self.kl_term, self.ce_term, val, self.tokens_seen
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub checkpoints: Vec<TrainCheckpoint<T>>,
    pub metrics: Vec<MetricsRow>,
}

/// Single-owner training loop over a [`ChunkSource`].
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: TrainCheckpoint<T>,
    /// Where checkpoints (`ckpt-<iter>.kdfc`) and `metrics.csv` go.
    pub out_dir: Option<PathBuf>,
    pub forward: ForwardOptions<T>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh student initialized from `config.seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let params = build_model(model, config.seed)?;
        Self::from_params(params, config)
    }

    pub fn from_params(params: ModelParams<T>, config: TrainConfig) -> Result<Self> {
        let slots = config.optimizer.resolve()?.slots();
        let optimizer = OptimizerState::new(&params, slots);
        Self::resume(
            TrainCheckpoint {
                iter: 0,
                tokens_seen: 0,
                params,
                optimizer,
            },
            config,
        )
    }

    pub fn resume(state: TrainCheckpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if state.iter > config.total_iters {
            return Err(Error::StepOutOfRange {
                step: state.iter,
                total: config.total_iters,
            });
        }
        Ok(Self {
            config,
            state,
            out_dir: None,
            forward: ForwardOptions::default(),
        })
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn log(&self, row: &MetricsRow) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = String::new();
        if fresh {
            line.push_str(METRICS_HEADER);
            line.push('\n');
        }
        line.push_str(&row.csv());
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Runs to `total_iters`. `source` must be positioned at the start of
    /// the data; the items consumed before the current iteration are skipped.
    pub fn run(mut self, source: &mut dyn ChunkSource, val_chunks: &[TokenChunk]) -> Result<TrainOutcome<T>> {
        let cfg = self.config.clone();
        source.skip(self.state.iter * cfg.global_batch as u64)?;
        let mut checkpoints = Vec::new();
        let mut metrics = Vec::new();
        while self.state.iter < cfg.total_iters {
            let iter = self.state.iter;
            let lr = wsd_lr(iter + 1, &cfg)?;
            let items = (0..cfg.global_batch)
                .map(|_| source.next_item())
                .collect::<Result<Vec<_>>>()?;
            let tokens: u64 = items.iter().map(|(c, _)| c.len() as u64).sum();
            let step = loss_and_grad(&self.state.params, &items, cfg.lambda_kd, &self.forward)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { iter },
                    e => e,
                })?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss { iter });
            }
            optimizer_step(&mut self.state.params, &step.grads, &mut self.state.optimizer, &cfg, lr, iter)?;
            self.state.iter += 1;
            self.state.tokens_seen += tokens;
            let done = self.state.iter;
            if cfg.log_interval > 0 && (done % cfg.log_interval == 0 || done == cfg.total_iters) {
                let val_loss = if val_chunks.is_empty() {
                    None
                } else {
                    Some(validation_loss(&self.state.params, val_chunks)?)
                };
                let row = MetricsRow {
                    iter: done,
                    lr,
                    train_loss: step.loss,
                    kl_term: step.terms.kl,
                    ce_term: step.terms.ce,
                    val_loss,
                    tokens_seen: self.state.tokens_seen,
                };
                self.log(&row)?;
                metrics.push(row);
            }
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
                if let Some(dir) = &self.out_dir {
                    self.state.save(&dir.join(format!("ckpt-{done:07}.kdfc")))?;
                }
                checkpoints.push(self.state.clone());
            }
        }
        Ok(TrainOutcome {
            params: self.state.params,
            checkpoints,
            metrics,
        })
    }
}

/// Distills a fresh student from a stored teacher-logit corpus.
pub fn train<T: Scalar>(
    student_config: &ModelConfig,
    manifest: &ShardManifest,
    train_config: &TrainConfig,
    val_chunks: &[TokenChunk],
) -> Result<TrainOutcome<T>> {
    check_compatible(student_config, manifest)?;
    let mut source = ManifestSource::new(manifest)?;
    Trainer::new(student_config, train_config.clone())?.run(&mut source, val_chunks)
}

pub fn check_compatible(student: &ModelConfig, manifest: &ShardManifest) -> Result<()> {
    if student.vocab != manifest.vocab {
        return Err(Error::Mismatch(format!(
            "student vocab {} vs manifest vocab {}",
            student.vocab, manifest.vocab
        )));
    }
    if manifest.chunk_len > student.seq_len {
        return Err(Error::Mismatch(format!(
            "chunk_len {} exceeds student seq_len {}",
            manifest.chunk_len, student.seq_len
        )));
    }
    if manifest.k > manifest.vocab {
        return Err(Error::Mismatch("K exceeds vocab".into()));
    }
    Ok(())
}

/// Elementwise arithmetic mean of parameter trees (running mean in f64).
pub fn weight_average<T: Scalar>(checkpoints: &[&ModelParams<T>]) -> Result<ModelParams<T>> {
    let first = checkpoints.first().ok_or(Error::Empty("checkpoints"))?;
    if checkpoints.iter().any(|c| c.config != first.config) {
        return Err(Error::shape("weight_average", "checkpoint configs differ"));
    }
    let mut mean: Vec<Vec<f64>> = first
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    for (n, c) in checkpoints.iter().enumerate() {
        let k = (n + 1) as f64;
        for (acc, (_, t)) in mean.iter_mut().zip(c.tensors()) {
            for (m, x) in acc.iter_mut().zip(t.data()) {
                *m += (x.as_f64() - *m) / k;
            }
        }
    }
    let tensors = first
        .tensors()
        .iter()
        .zip(mean)
        .map(|((_, t), m)| Tensor::from_vec(t.shape(), m.into_iter().map(T::of).collect()))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(first.config.clone(), tensors)
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown activation `{0}` (no implementation registered)")]
    UnknownActivation(String),

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("document boundaries must be sorted, unique and inside the sequence")]
    UnsortedBoundaries,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("K = {k} exceeds vocabulary size {vocab}")]
    TopKTooLarge { k: usize, vocab: usize },

    #[error("checksum mismatch in shard {}", .shard.display())]
    Checksum { shard: PathBuf },

    #[error("truncated shard {}", .shard.display())]
    Truncated { shard: PathBuf },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("manifest/model mismatch: {0}")]
    Mismatch(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("NaN gradient at iteration {iter}")]
    NanGradient { iter: u64 },

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },

    #[error("renormalization mass of the teacher record is zero")]
    ZeroMass,

    #[error("Cholesky factorization failed at pivot {pivot}; increase damping")]
    Cholesky { pivot: usize },

    #[error("QAD diverged at step {step}: loss above twice the initial value for 100 steps")]
    Diverged { step: usize },

    #[error("baseline mean score is zero")]
    ZeroBaseline,

    #[error("task sequence length {needed} exceeds model seq_len {seq_len}")]
    TaskTooLong { needed: usize, seq_len: usize },

    #[error("function not evaluable at perturbed point: {0}")]
    NotEvaluable(String),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

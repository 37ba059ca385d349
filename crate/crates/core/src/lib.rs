//! Desk-scale laboratory for pre-training distillation from stored sparse
//! teacher logits, followed by post-training quantization (RTN, GPTQ and
//! quantization-aware distillation), with cost accounting and
//! cost/quality frontier analysis.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! two precisions used in practice (`f32` for training and serving, `f64`
//! for gradient checks and function-preservation probes).

pub mod distill;
pub mod error;
pub mod harness;
pub mod logitstore;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;

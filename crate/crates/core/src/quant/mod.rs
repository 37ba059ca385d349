//! Quantization: grids and codecs, RTN and GPTQ, norm fusion, and
//! quantization-aware distillation.

pub mod codec;
mod format;
mod fuse;
mod gptq;
mod model;
mod qad;
mod recovery;
mod ste;
mod tensor;

pub use format::{quant_grid, QuantFormat, QuantKind, Scope};
pub use fuse::{equalizing_scales, fuse_norms};
pub use gptq::{calib_hessian, cholesky, gptq, gptq_objective, spd_inverse, GPTQ_DAMP};
pub use model::{
    calibration_hessians, is_block_linear, quantize_model, FileLayout, PtqMethod, QuantizedModel, StoredTensor,
    QUANT_CHECKPOINT_MAGIC,
};
pub use qad::{qad, QadConfig, QadOutcome, DIVERGENCE_WINDOW};
pub use recovery::recovery;
pub use ste::SteQuantizer;
pub use tensor::{fake_quant, fake_quant_masked, quantize, round_bf16, Encoded, QuantParams, QuantizedTensor};

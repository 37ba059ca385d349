//! The miniature dense transformer: configuration, parameters,
//! forward pass and checkpoint files.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    load_checkpoint, read_header, read_params, save_checkpoint, write_header, write_params,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{count_params, ModelConfig, ParamCount};
pub use forward::{
    batch_logits, forward, forward_tape, Batch, ForwardOptions, ForwardTrace, LayerVars, ParamVars,
};
pub use params::{build_model, expected_shapes, LayerParams, Linear, ModelParams};

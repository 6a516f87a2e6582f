//! T5-style encoder-decoder: pre-RMSNorm sublayers without biases, ReLU
//! feed-forward, learned relative-position buckets and a tied output
//! embedding.

mod bucket;
mod config;
mod forward;
mod inference;
pub mod params;

pub use bucket::{bucket_matrix, relative_position_bucket};
pub use config::ModelConfig;
pub use forward::{forward, loss, shift_right, BoundParams, SeqBatch};
pub use inference::{encode, label_log_probs, DecoderCache, EncoderMemory, StepRequest};
pub use params::{init_model, param_shapes, ModelParams};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

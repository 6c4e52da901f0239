//! 1D vision transformer over four-channel 30-second segments.
//!
//! A strided convolution cuts each segment into non-overlapping patch
//! embeddings; a learned class token is prepended and a learned positional
//! table added. Encoder layers are post-norm: each residual sum is normalized
//! after the add, unlike the pre-norm layout most ViT code uses, so the
//! normalization sits on the trunk rather than the branch. The class token's
//! final state feeds a two-layer shared head and two softmax branches, one
//! per task.
//!
//! Training-time stochasticity (dropout, stochastic depth) is injected
//! through an explicit rng handle; evaluation is a pure function of
//! parameters and input.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    checkpoint_meta, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{
    build_forward, collect_attention, forward, AttentionBundle, ForwardGraph, ForwardOutput,
    LAYER_NORM_EPS,
};
pub use params::{init_params, LayerParams, ModelParams, WEIGHT_STD};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

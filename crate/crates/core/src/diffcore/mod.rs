//! Minimal differentiable-network substrate.
//!
//! Everything here is hand-derived for fixed MLP architectures: named parameter
//! storage with gradient buffers and freeze flags, batched forward/backward
//! passes, an Adam optimizer and a JSON checkpoint format.

mod checkpoint;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{
    load_checkpoint, load_params, save_params, Checkpoint, OptimizerRecord, RngState, TensorRecord,
    CHECKPOINT_FORMAT_VERSION,
};
pub use mlp::{mlp_backward, mlp_forward, Activation, Mlp, MlpCache, MlpSpec};
pub use optim::{Adam, AdamConfig, StepStatus};
pub use params::{glob_match, ParamId, ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("parameter `{0}` is already registered")]
    DuplicateName(String),
    #[error("no parameter named `{0}`")]
    UnknownName(String),
    #[error("tensor `{name}`: shape {shape:?} holds {expected} values, got {got}")]
    ShapeData {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("invalid mlp spec: {0}")]
    InvalidSpec(String),
    #[error("layer `{layer}`: expected input width {expected}, got {got}")]
    DimensionMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("activation cache does not belong to `{0}` (missing or stale forward pass)")]
    CacheMismatch(String),
    #[error("freeze pattern `{0}` matches no registered parameter")]
    UnmatchedPattern(String),
    #[error("checkpoint io error: {0}")]
    Io(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint mismatch at `{field}`: {detail}")]
    CheckpointMismatch { field: String, detail: String },
}

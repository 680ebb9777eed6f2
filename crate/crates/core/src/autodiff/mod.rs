//! Minimal reverse-mode automatic differentiation: tensors, a gradient tape,
//! named parameters with checkpointing, the layer set used by the decoder and
//! an Adam optimizer.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use nn::{AddNorm, Attention, Embedding, Ffn, Linear, Mlp, ProjectedKv};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, CHECKPOINT_VERSION};
pub use tape::{Backward, Mask, OpKind, Reduction, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{context}: dimension mismatch, expected {expected:?}, got {got:?}")]
    Shape { context: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("{context}: expected rank {expected}, got shape {got:?}")]
    Rank { context: String, expected: usize, got: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{context}: index {index} out of range for {len} rows")]
    Index { context: String, index: usize, len: usize },
    #[error("group {group} of a mean pooling has no members")]
    EmptyGroup { group: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("model dim {dim} is not divisible into {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("degenerate attention mask: query row {row} has no visible key")]
    DegenerateMask { row: usize },
    #[error("{context}: degenerate attention mask, query row {row} has no visible key")]
    DegenerateMaskAt { context: String, row: usize },
    #[error("target {target} at position {position} is outside the vocabulary of {vocab}")]
    TargetOutOfRange { position: usize, target: usize, vocab: usize },
    #[error("backward already ran on this tape; reset it before recording a new step")]
    TapeConsumed,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    CheckpointVersion { found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

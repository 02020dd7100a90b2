use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: channel mismatch, input has {got} channels but weights expect {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: invalid geometry: {reason}")]
    Geometry { op: &'static str, reason: String },

    #[error("{op}: data length {len} does not match shape {shape}")]
    DataLength {
        op: &'static str,
        shape: Shape,
        len: usize,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid pattern {text:?}: {reason}")]
    Pattern { text: String, reason: String },

    #[error("model: {0}")]
    Model(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures when reading or applying a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"DMPN\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: needed {needed} more bytes while reading {context}")]
    Truncated { context: String, needed: usize },

    #[error("dimension overflow in tensor {name:?}: dims {dims:?}")]
    DimensionOverflow { name: String, dims: Vec<u64> },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("tensor {name:?}: shape mismatch, checkpoint has {found:?} but model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {name:?}: dtype mismatch")]
    DType { name: String },
}

//! Deep multi-patch hierarchical deblurring networks on a small
//! reverse-mode autodiff core.

pub mod baseline;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod stacking;
pub mod train;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelKind, ModelSpec};
pub use tensor::{DType, Gradients, Scalar, Shape, Tape, Tensor, Var};

pub use train::{TrainConfig, Trainer};

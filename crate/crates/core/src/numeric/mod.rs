//! Minimal dense-tensor engine: the forward primitives the network needs,
//! reverse-mode differentiation on a per-step tape, and an Adam optimizer.
//!
//! Values are stored as f64 and every operation validates that its output is
//! finite; a NaN or Inf anywhere surfaces as [`NumericError::NonFinite`]
//! instead of silently corrupting a training run.

mod adam;
mod checkpoint;
mod gradcheck;
mod nn;
mod tape;
mod tensor;

pub use adam::{AdamState, LrSchedule};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::grad_check;
pub use nn::{xavier_uniform, BoundMlp, BoundParams, MlpSpec, ParamStore};
pub use tape::{Tape, Var, GATHER_PAD};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },
    #[error("backward needs a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("parameter {name:?} registered twice")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("checkpoint malformed: {reason}")]
    Checkpoint { reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

//! Dense tensors with a reverse-mode tape, a central-difference gradient
//! check and the `LMTN` tensor file format.

mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{read_tensors, read_tensors_from, write_tensors, write_tensors_to, MAGIC, VERSION};
pub use gradcheck::{central_difference, finite_diff_check, max_relative_error};
pub use tape::{normalize, softmax_in_place, softmax_rows, Axis, Gradients, KernelOp, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("tensor is not recorded on this trace")]
    NotInTrace,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

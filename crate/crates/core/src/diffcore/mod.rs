//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] sweeps it once in
//! reverse. Tapes are cheap and meant to be rebuilt every step.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_difference_check, relative_error, FdReport, REL_ERR_FLOOR};
pub use tape::{backward_passes, log_softmax_rows, sigmoid, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite output from {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

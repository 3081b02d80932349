//! Dense fp64 tensors with tape-based reverse-mode differentiation.

mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, relative_error, GradCheckReport};
pub use params::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::{masked_softmax, softmax_row, Tensor};

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: [usize; 2] },
    #[error("forward pass is not deterministic ({first} != {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("{0}")]
    InvalidArgument(String),
}

//! Matrices, column-wise primitives and a reverse-mode tape.

mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::{dot, norm, Matrix};
pub use ops::{causal_softmax, cross_entropy, layer_norm, mse, one_hot, LnMode};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("layer norm input column {column} has zero variance")]
    ZeroVariance { column: usize },
    #[error("shape error: {0}")]
    Shape(String),
}

//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and accumulates
//! gradients into the leaves created from [`Array::requiring_grad`] inputs.

mod array;
mod check;
pub(crate) mod elementwise;
mod graph;
pub(crate) mod linalg;
pub(crate) mod nn;
mod shape;
pub mod suite;

pub use array::Array;
pub use check::grad_check;
pub use elementwise::{sigmoid, softplus};
pub use graph::{Graph, Var};
pub use suite::{primitive_suite, CheckReport};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid array: {0}")]
    InvalidArray(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}

#[cfg(test)]
mod tests;

//! Nested automatic differentiation.
//!
//! [`Tape`]/[`Var`]/[`Dual2`] form a scalar engine with forward-mode tangents
//! recorded on a reverse-mode tape. [`Graph`] applies the same scheme to dense
//! batches and drives training.

mod graph;
mod scalar;

pub use graph::{Graph, GraphGradients, NodeId};
pub use scalar::{cross3, dot, norm, sum, Dual2, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {value} cannot be recorded")]
    NonFinite { value: f64 },
    #[error("node {node} holds a non-finite value")]
    NonFiniteNode { node: usize },
    #[error("output variable does not belong to this tape")]
    ForeignVar,
    #[error("division by zero")]
    DivisionByZero,
    #[error("norm of the zero vector")]
    ZeroNorm,
    #[error("{op} undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a 1x1 output, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
}

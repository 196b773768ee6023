//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is deliberately small: a closed set of operations, one scalar
//! root per gradient query, and a finite-difference checker that exercises
//! every backward rule from the outside. See [`graph`] for the operation
//! set and [`check`] for the oracle.

mod check;
mod graph;
mod tensor;

pub use check::{
    check_gradient, fd_gradient, GradCheckReport, LeafCheck, DEFAULT_FD_STEP,
    DEFAULT_FD_TOLERANCE,
};
pub use graph::{Bindings, ExprGraph, GraphBuilder, NodeId};
pub use tensor::Tensor;

pub type DiffResult<T> = Result<T, DiffError>;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("index {index} out of bounds for axis of size {size} at node {node}")]
    IndexOutOfBounds {
        node: usize,
        index: usize,
        size: usize,
    },
    #[error("leaf `{0}` has no bound value")]
    UnboundLeaf(String),
    #[error("leaf `{0}` is not declared in this graph")]
    UnknownLeaf(String),
    #[error("binding for leaf `{name}` has shape {got:?}, declared {want:?}")]
    BindingShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("gradient requires a scalar root, got root shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("tensor data contains a non-finite value")]
    NonFiniteData,
}

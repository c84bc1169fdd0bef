use thiserror::Error;

use super::OpKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: OpKind, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} has requires_grad = false and cannot be a differentiation target")]
    NotDifferentiable(usize),
    #[error("no derivative rule registered for op `{0}`")]
    UnsupportedDerivative(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("values belong to different graphs")]
    ForeignNode,
}

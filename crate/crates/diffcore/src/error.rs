use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("matmul shape mismatch: {left:?} x {right:?}")]
    MatmulShape { left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: incompatible shapes {left:?} and {right:?} (only same-shape or scalar broadcasting)")]
    Broadcast {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },

    #[error("division by zero")]
    DivisionByZero,

    #[error("{op} expects {expected} argument(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("concat: part {index} has shape {shape:?}, incompatible with {first:?} on axis {axis}")]
    ConcatShape {
        axis: usize,
        index: usize,
        first: Vec<usize>,
        shape: Vec<usize>,
    },

    #[error("concat of an empty part list")]
    EmptyConcat,

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("slice {start}..{end} exceeds extent {extent} on axis {axis}")]
    SliceRange {
        axis: usize,
        start: usize,
        end: usize,
        extent: usize,
    },

    #[error("row id {id} out of range for a table with {rows} rows")]
    GatherIndex { id: usize, rows: usize },

    #[error("expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { shape: Vec<usize> },

    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("variable {index} is not on this tape (tape has {len} nodes)")]
    UnknownVar { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

use thiserror::Error;

use crate::DType;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("non-finite value {value} at flat index {index}{}", .op.map(|o| format!(" (after {o})")).unwrap_or_default())]
    NonFinite {
        index: usize,
        value: f64,
        op: Option<&'static str>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("label {label} at pixel (y={y}, x={x}) is outside [0, {n_cls})")]
    LabelOutOfRange {
        label: u32,
        y: usize,
        x: usize,
        n_cls: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    Invalid(String),

    #[error("dtype mismatch: stored {stored}, requested {requested}")]
    DTypeMismatch { stored: DType, requested: DType },

    #[error("malformed tensor header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

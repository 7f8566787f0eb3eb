//! Dense tensors with a gradient tape for reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Leaves enter through [`Tape::param`]
//! (gradient requested) or [`Tape::constant`]; every operation appends a node
//! and returns a [`Var`] handle. [`Tape::backward`] sweeps the nodes in
//! reverse and returns the leaf [`Gradients`]. The tape is discarded after
//! use; higher-order derivatives are not supported.
//!
//! Every operation is generic over [`Element`] (`f32` or `f64`).

pub mod attention;
mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod serialize;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use tape::{CrossEntropy, Gradients, Tape, Var};
pub use tensor::{contiguous_strides, numel, Tensor};

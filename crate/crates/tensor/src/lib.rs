//! Dense `f32`/`f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every op as it executes; [`Graph::backward`] then walks
//! the tape in reverse and sums gradients into the leaves created with
//! [`Graph::param`]. Reductions accumulate in `f64` and always run in the same
//! left-to-right order, so identical op schedules give bit-identical results.

mod error;
mod graph;
mod kernels;
mod ops;
mod real;
mod tensor;

pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

/// Default epsilon added to the variance in [`Graph::batch_norm`].
pub const BN_EPS: f64 = 1e-5;

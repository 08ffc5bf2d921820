//! Reverse-mode automatic differentiation for the handful of operators a
//! convolutional encoder-decoder needs: same-padded convolutions, 2x2
//! transposed convolutions, batch norm, max pooling with indices, unpooling,
//! channel concatenation, dropout and the MSE / BCE losses.
//!
//! Everything runs single-threaded with a fixed reduction order, so two runs
//! over identical inputs produce bit-identical results.

mod conv;
mod graph;
mod real;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, PoolIndices, Var};
pub use real::Real;
pub use tensor::Tensor;

//! Dense tensors and a reverse-mode differentiation engine that can
//! differentiate through previously computed gradients.

pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

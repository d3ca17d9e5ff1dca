//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod linalg;
mod tensor;

pub use graph::{BackwardCtx, Gradients, Graph, Var, PAD};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod graph;
mod ops;

pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::permute_tensor;

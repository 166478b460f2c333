//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod check;
mod graph;
mod ops;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub(crate) use ops::sigmoid;
pub use tensor::Tensor;

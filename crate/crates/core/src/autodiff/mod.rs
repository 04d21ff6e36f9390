//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{sigmoid, softplus};
pub use optim::{Moments, OptimConfig, OptimKind, Optimizer};
pub use tensor::{Tensor, TensorId};

#[cfg(test)]
mod tests;

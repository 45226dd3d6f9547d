//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operators the region classifier needs are provided. Build a
//! [`Graph`] per forward pass, call [`Graph::backward`] on a scalar loss,
//! then read gradients with [`Graph::grad`].

mod graph;
mod tensor;

pub use graph::{binary_cross_entropy, sigmoid, softmax, Graph, NodeId, OpKind};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

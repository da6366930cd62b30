//! Minimal reverse-mode differentiation engine and AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff, max_relative_error};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamW, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

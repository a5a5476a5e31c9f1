//! Dense tensors, reverse-mode autodiff and the layer primitives the model
//! is built from.

mod graph;
pub(crate) mod kernels;
pub mod ops;
pub mod optim;
mod tensor;

pub use graph::{Graph, NodeRecord, Var};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use tensor::Tensor;

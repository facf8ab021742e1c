//! Reverse-mode automatic differentiation for the supported layer set, with
//! second-order differentiation through one inner gradient step.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{GradMode, Graph, NodeId};
pub use tensor::Tensor;

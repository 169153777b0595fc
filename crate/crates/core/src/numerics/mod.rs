//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{central_difference, grad_check, graph_function};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

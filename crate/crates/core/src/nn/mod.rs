//! Minimal tensor and autograd engine used by the two subnetworks.

mod graph;
mod ops;
mod tensor;

pub use graph::{Graph, NodeId, NormMode, NormStats, Pattern, NORM_EPS};
pub use ops::gemm;
pub use tensor::Tensor;

//! Minimal CPU neural-network engine: f32 tensors, a tape-based autograd
//! graph with the layers the backbones need, Adam, and flat weight files.

mod gemm;
mod graph;
mod io;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gemm::gemm;
pub use graph::{mse_loss, Conv2dSpec, Graph, LeafGrads, NodeId};
pub use io::{load_weights, read_weights, save_weights};
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use optim::Adam;
pub use params::{kaiming_normal, uniform_fan_in, Buffer, BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod grad_tests;

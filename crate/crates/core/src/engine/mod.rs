//! Minimal tensor and reverse-mode autodiff engine for 2-D convolutional
//! networks on the CPU.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Mode, Var, BN_EPS, BN_MOMENTUM};
pub use optim::Sgd;
pub use params::{Builder, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

//! Minimal CPU network engine: NHWC tensors, a layer graph with manual
//! backward passes, losses and optimizers.

mod gemm;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;

pub use graph::{ForwardPass, Gradients, Graph, Mode, Node, ParamGroup, ParamTensor, Section};
pub use layers::{Op, Padding};
pub use loss::LossKind;
pub use optim::{Optimizer, OptimizerConfig};

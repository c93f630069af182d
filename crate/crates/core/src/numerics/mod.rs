//! Dense tensors, a reverse-mode tape, AdamW, and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::{conv2d, conv2d_transpose, layer_norm, matmul, softmax};
pub use optim::{lr_schedule, lr_schedule_with, mean_grads, sum_grads_scaled, AdamWConfig, OptimState};
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};

//! Small dense tensors, reverse-mode gradients and the Adam optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var, SELU_ALPHA, SELU_LAMBDA};
pub use optim::{adam_step, clip_grad_norm, clip_grad_norm_in_place, AdamState};
pub use params::{grad, ParamBlock, ParamVars, ParamVector};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

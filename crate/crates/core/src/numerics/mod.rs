//! Dense `f64` tensors, a tape-based reverse-mode engine, Adam, and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use gradcheck::{directional_check, grad_check, grad_check_with_step, relative_error, FD_STEP};
pub use graph::{AttnBlock, AttnLayout, Gradients, Graph, Var};
pub use kernels::{cross_entropy, gelu, gelu_grad, log_softmax, softmax};
pub use params::{Adam, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod op_tests;

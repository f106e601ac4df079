//! Minimal tensor and reverse-mode autodiff engine used by every trainable
//! network in the crate.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{logsumexp, sigmoid, Gradients, Graph, Var};
pub use layers::{Bound, Conv2d, Init, Linear, ParamId, ParamStore};
pub use optim::{clip_grad_norm, collect_grads, AdamW};
pub use tensor::{gemm, Real, Tensor};

#[cfg(test)]
mod gradcheck;

//! Dense `f64` tensors with a tape-based reverse-mode autograd.
//!
//! Kernels are row-parallel through rayon when the `parallel` feature is
//! enabled (the default) and sequential otherwise. Both builds produce
//! bitwise-identical results.

pub mod check;
mod graph;
pub mod init;
pub mod kernels;
mod ops;
pub mod optim;
pub mod par;
mod params;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{sigmoid, SumOrder};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use params::{accumulate_grads, ParamStore, Session};
pub use tensor::Tensor;

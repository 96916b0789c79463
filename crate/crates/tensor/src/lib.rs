//! Minimal f64 tensor core with reverse-mode autodiff.
//!
//! The pieces:
//!
//! - [`Tensor`]: dense row-major f64 arrays.
//! - [`Graph`]: define-by-run tape with the kernel set a small transformer
//!   needs (matmul, masked softmax, layer norm, GELU, embedding lookup,
//!   dropout, label-smoothed cross entropy) and exact reverse-mode gradients.
//! - [`adam`]: Adam with bias correction and linear warmup/decay.
//! - [`checkpoint`]: versioned binary serialization of named tensors.
//!
//! With the default `parallel` feature, large row-wise kernels fan out over
//! rayon; results are bit-identical to the sequential fallback because work
//! splits by output row and each row reduces sequentially.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{adam_step, AdamState, OptimizerConfig};
pub use graph::{Gradients, Graph, NodeId, Reduction};
pub use tensor::{Result, Tensor, TensorError};

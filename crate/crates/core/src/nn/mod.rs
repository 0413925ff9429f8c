//! Minimal dense neural-network engine in 64-bit floats.
//!
//! Fixed-topology MLPs (linear layers with ReLU between them), log-softmax,
//! cross-entropy against one-hot targets, exact reverse-mode gradients and
//! the Adam optimizer. Everything is a pure function over value types.

mod adam;
mod matrix;
mod mlp;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{
    linear_forward, log_softmax, log_softmax_rows, loss_and_grad, mlp_backward, mlp_forward,
    softmax_cross_entropy, Linear, LossKind, MlpParams, Tape,
};

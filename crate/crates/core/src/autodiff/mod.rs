//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod fd;
mod optim;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use fd::{check_gradients, finite_diff_grad, grad_error};
pub use optim::{AdamConfig, AdamState};
pub use params::{Binder, ParamId, ParamStore};
pub use tape::{conv1d_output_len, BatchStats, BnMode, OpKind, Padding, Tape, Var, CE_FLOOR};
pub use tensor::Tensor;

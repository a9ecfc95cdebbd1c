//! Reverse-mode differentiation over dense arrays, plus the Adam optimizer.

mod adam;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{finite_diff_gradient, relative_error};
pub use param::{Bound, Dense, Mlp, ParamSet, Parameter};
pub use tape::{posenc_forward, sigmoid, softplus, Activation, CustomOp, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a 1x1 output, got {0:?}")]
    NonScalar((usize, usize)),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

#[cfg(test)]
mod tests;

//! Generative radiance fields with latent energy-based priors: tape autodiff,
//! a latent-conditioned radiance field with volume rendering, energy-based
//! latent priors, MCMC and amortised inference, training loops, synthetic data
//! and evaluation.

// NaN-rejecting `!(x > 0)` checks and index loops over parallel arrays are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ad;
pub mod ebm;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nerf;
pub mod render;
pub mod runconfig;
pub mod scalar;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete instantiations; training runs in `f32`, tests and gradient checks in `f64`.
pub type Tensor32 = ad::Tensor<f32>;
pub type Tensor64 = ad::Tensor<f64>;
pub type Tape32 = ad::Tape<f32>;
pub type Tape64 = ad::Tape<f64>;
pub type Generator32 = nerf::Generator<f32>;
pub type Generator64 = nerf::Generator<f64>;
pub type EnergyNet32 = ebm::EnergyNet<f32>;
pub type EnergyNet64 = ebm::EnergyNet<f64>;
pub type Encoder32 = inference::Encoder<f32>;
pub type Encoder64 = inference::Encoder<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;

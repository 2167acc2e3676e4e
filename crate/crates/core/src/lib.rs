//! Partitioned-latent masked autoencoder pre-training for multi-contrast 3D
//! brain volumes, with a synthetic phantom generator, few-shot fine-tuning
//! and latent probes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training and for gradient checks.

pub mod finetune_eval;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod volume_store;

pub use scalar::Scalar;
pub use tensor::{Tensor, Volume};

/// Single-precision network, used for training and evaluation.
pub type UNet32 = model::UNet<f32>;
/// Double-precision network, used for gradient verification.
pub type UNet64 = model::UNet<f64>;

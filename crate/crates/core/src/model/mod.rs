//! The partitioned-latent 3D U-Net and its building blocks.

pub mod ops;
pub mod params;
pub mod unet;

pub use ops::Activation;
pub use params::{Grads, Init, Param, ParamId, ParamSet};
pub use unet::{
    conv3_param_count, count_parameters, DecodeGrad, DecodeMode, DecoderTape, EncoderOutput, EncoderTape,
    LatentPartition, ModelError, NormKind, ReconTape, UNet, UNetConfig,
};

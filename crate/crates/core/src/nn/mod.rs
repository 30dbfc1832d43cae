//! Shared network building blocks: the Res2Net-style encoder, 32-channel
//! pyramid compression and the UNet-style decoder (together, R2UNet).

pub mod layers;
pub mod r2unet;
pub mod res2net;

pub use r2unet::{Compression, Decoder, DecoderOutput, FeaturePyramid, R2UNet, R2UNetConfig, FEATURE_CHANNELS};
pub use res2net::{Encoder, EncoderConfig, Res2NetBlock, LEVELS};

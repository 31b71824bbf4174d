//! The denoiser, the feature encoder and its two pretraining routines.

mod encoder;
mod layers;
mod pretrain;
mod texture;
mod unet;

pub(crate) use crate::seeded_rng;

pub use encoder::{Context, EncoderConfig, EncoderSidecar, VggEncoder, DEEP_TAP, INPUT_SCALE, SHALLOW_TAP};
pub use layers::Conv2d;
pub use pretrain::{pretrain_domain, pretrain_generic, DomainPretrainReport, GenericPretrainReport, PretrainOptions, TaggedSlice};
pub use texture::{texture_dataset, TextureClass, TextureSample};
pub use unet::{UNetConfig, UNetDenoiser};

#[cfg(test)]
mod tests;

//! Style transfer in the token space of a vector-quantised autoencoder.
//!
//! Content images are encoded to discrete tokens, corrupted with a
//! mask-and-replace schedule and denoised by a transformer conditioned on
//! AdaIN-fused encoder features of a content/style pair. Everything numeric is
//! generic over [`Scalar`]; the aliases below fix the element type.

pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod persistence;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vq;

pub use error::{CheckpointError, Error, Result};
pub use image_io::ImageTensor;
pub use pipeline::{ModelConfig, StyleInput, StyleModel, StylizeOptions};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type FeatureMap32 = perceptual::FeatureMap<f32>;
pub type FeatureMap64 = perceptual::FeatureMap<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type StyleModel32 = StyleModel<f32>;
pub type StyleModel64 = StyleModel<f64>;
pub type Checkpoint32 = persistence::Checkpoint<f32>;
pub type Checkpoint64 = persistence::Checkpoint<f64>;

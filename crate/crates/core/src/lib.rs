//! Learned hyperspectral image compression with a pixelwise transformer
//! autoencoder.

mod binio;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use binio::fnv1a64;
pub use dataio::HsiCube;
pub use error::{Error, Result};
pub use model::{CompressionRatio, ModelConfig, ModelWeights};
pub use training::{derive_seed, TrainConfig};

//! Latent container: encode a cube to Γ values per pixel and back.
//!
//! Layout (little-endian): magic `HYC1`, version u16, height/width/gamma
//! u32, model fingerprint u64, raw_min/raw_max f64, then H·W·Γ f32 latents
//! with the latent index innermost.

use std::fs;
use std::path::Path;

use crate::binio::{dim_u32, put_f32s, Reader};
use crate::dataio::HsiCube;
use crate::error::{Error, Result};
use crate::model::ModelWeights;

pub const CONTAINER_MAGIC: &[u8; 4] = b"HYC1";
pub const CONTAINER_VERSION: u16 = 1;
pub const CONTAINER_HEADER_BYTES: usize = 4 + 2 + 12 + 8 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedImage {
    pub height: usize,
    pub width: usize,
    pub gamma: usize,
    pub model_fingerprint: u64,
    pub raw_min: f64,
    pub raw_max: f64,
    pub latents: Vec<f32>,
}

impl CompressedImage {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(CONTAINER_HEADER_BYTES + 4 * self.latents.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        for (v, what) in [(self.height, "height"), (self.width, "width"), (self.gamma, "gamma")] {
            out.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
        }
        out.extend_from_slice(&self.model_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.raw_min.to_le_bytes());
        out.extend_from_slice(&self.raw_max.to_le_bytes());
        put_f32s(&mut out, self.latents.iter().copied());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != CONTAINER_MAGIC {
            return Err(Error::Format(format!(
                "not a compressed image: magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let gamma = r.u32()? as usize;
        let model_fingerprint = r.u64()?;
        let raw_min = r.f64()?;
        let raw_max = r.f64()?;
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(gamma))
            .ok_or_else(|| Error::Format("latent payload size overflow".into()))?;
        let latents = r.f32_vec(n)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after payload", r.remaining())));
        }
        Ok(CompressedImage {
            height,
            width,
            gamma,
            model_fingerprint,
            raw_min,
            raw_max,
            latents,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Payload size in bits per pixel and band of the original cube.
    pub fn bits_per_value(&self, bands: usize) -> f64 {
        32.0 * self.gamma as f64 / bands as f64
    }
}

/// Runs the encoder over every pixel and stores the latents as f32.
pub fn compress(cube: &HsiCube, model: &ModelWeights) -> Result<CompressedImage> {
    let cfg = model.config();
    if cube.bands() != cfg.bands {
        return Err(Error::Config(format!(
            "cube has {} bands, model expects {}",
            cube.bands(),
            cfg.bands
        )));
    }
    let latents = model.encode_pixels(cube.data())?;
    Ok(CompressedImage {
        height: cube.height(),
        width: cube.width(),
        gamma: cfg.gamma,
        model_fingerprint: model.fingerprint(),
        raw_min: cube.raw_min(),
        raw_max: cube.raw_max(),
        latents: latents.into_iter().map(|v| v as f32).collect(),
    })
}

/// Decodes the stored latents with the decoder of `model`, which must be the
/// model that produced them.
pub fn decompress(image: &CompressedImage, model: &ModelWeights) -> Result<HsiCube> {
    let found = model.fingerprint();
    if image.model_fingerprint != found {
        return Err(Error::ModelMismatch {
            expected: image.model_fingerprint,
            found,
        });
    }
    let cfg = model.config();
    if image.gamma != cfg.gamma {
        return Err(Error::Config(format!(
            "container holds {} latents per pixel, model produces {}",
            image.gamma, cfg.gamma
        )));
    }
    let expected = image.height * image.width * image.gamma;
    if image.latents.len() != expected {
        return Err(Error::Length {
            expected,
            found: image.latents.len(),
        });
    }
    let latents: Vec<f64> = image.latents.iter().map(|&v| v as f64).collect();
    let data = model.decode_latents(&latents)?;
    HsiCube::with_range(image.height, image.width, cfg.bands, data, image.raw_min, image.raw_max)
}

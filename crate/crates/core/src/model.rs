//! The pixelwise transformer autoencoder.
//!
//! Each pixel spectrum is zero-padded to a multiple of the group depth, cut
//! into groups of neighbouring bands, and every group is linearly embedded as
//! a token. A learnable compression token is prepended, learned position
//! embeddings are added, and the sequence runs through pre-norm transformer
//! blocks:
//!
//! ```text
//! t' = MSA(LN(t)) + t
//! t  = MLP(LN(t')) + t'
//! ```
//!
//! The compression token is then projected to `gamma` latent channels by a
//! two-layer MLP with a sigmoid output. The decoder is a two-layer MLP that
//! maps the latent back to `bands` values in `(0, 1)`.
//!
//! Pixels never interact: encoding a cube is the same as encoding each of its
//! pixels on its own, bit for bit.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::binio::{dim_u32, fnv1a64, put_f32s, Reader};
use crate::dataio::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Pixels per graph during batched inference.
const INFER_CHUNK: usize = 256;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HYCW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Spectral bands `C` of the input.
    pub bands: usize,
    /// Neighbouring bands merged into one token (`g_d`).
    pub group_depth: usize,
    pub embed_dim: usize,
    /// Transformer block count `L`.
    pub blocks: usize,
    /// Attention heads `k`.
    pub heads: usize,
    /// Hidden width of the encoder-head and decoder MLPs.
    pub hidden_dim: usize,
    /// Latent channels per pixel (`Γ`).
    pub gamma: usize,
    /// Hidden width of the MLP inside each transformer block.
    pub block_mlp_dim: usize,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Bias terms on every linear layer.
    pub bias: bool,
    /// Bias on the fused query/key/value projection (only when `bias` is set).
    pub qkv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bands: 202,
            group_depth: 4,
            embed_dim: 64,
            blocks: 5,
            heads: 4,
            hidden_dim: 1024,
            gamma: 7,
            block_mlp_dim: 256,
            leaky_slope: 0.01,
            seed: 0,
            bias: true,
            qkv_bias: true,
        }
    }
}

/// Zero bands appended so that `bands` becomes a multiple of `group_depth`.
pub fn padding(bands: usize, group_depth: usize) -> usize {
    (group_depth - bands % group_depth) % group_depth
}

/// Pads a spectrum with zeros and cuts it into groups of `group_depth` bands.
pub fn pad_and_group(pixel: &[f64], group_depth: usize) -> Result<Vec<Vec<f64>>> {
    if group_depth == 0 {
        return Err(Error::Contract("group depth must be at least 1".into()));
    }
    if pixel.is_empty() {
        return Err(Error::Contract("pixel spectrum is empty".into()));
    }
    let mut padded = pixel.to_vec();
    padded.resize(pixel.len() + padding(pixel.len(), group_depth), 0.0);
    Ok(padded.chunks(group_depth).map(<[f64]>::to_vec).collect())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("group_depth", self.group_depth),
            ("embed_dim", self.embed_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("gamma", self.gamma),
            ("block_mlp_dim", self.block_mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.gamma > self.bands {
            return Err(Error::Config(format!(
                "gamma {} exceeds band count {}",
                self.gamma, self.bands
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        for (name, v) in positive {
            if u32::try_from(v).is_err() {
                return Err(Error::Config(format!("{name} {v} is too large")));
            }
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        padding(self.bands, self.group_depth)
    }

    pub fn padded_bands(&self) -> usize {
        self.bands + self.padding()
    }

    /// Spectral groups per pixel.
    pub fn groups(&self) -> usize {
        self.padded_bands() / self.group_depth
    }

    /// Tokens per pixel: one per group plus the compression token.
    pub fn n_tokens(&self) -> usize {
        self.groups() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn cr(&self) -> CompressionRatio {
        CompressionRatio::new(self.bands, self.gamma)
    }

    fn has_qkv_bias(&self) -> bool {
        self.bias && self.qkv_bias
    }

    /// Closed-form learnable scalar count.
    pub fn param_count(&self) -> usize {
        let b = |n: usize| if self.bias { n } else { 0 };
        let (d, m, h) = (self.embed_dim, self.block_mlp_dim, self.hidden_dim);
        let embedding = self.group_depth * d + b(d) + d + self.n_tokens() * d;
        let qkv = d * 3 * d + if self.has_qkv_bias() { 3 * d } else { 0 };
        let block = 4 * d + qkv + d * d + b(d) + d * m + b(m) + m * d + b(d);
        let encoder_head = d * h + b(h) + h * self.gamma + b(self.gamma);
        let decoder = self.gamma * h + b(h) + h * self.bands + b(self.bands);
        embedding + self.blocks * block + encoder_head + decoder
    }

    /// Forward-pass FLOPs for an `height × width` image.
    ///
    /// Convention, per pixel:
    /// * linear map `in → out` on `r` rows: `r·2·in·out`, plus `r·out` for bias;
    /// * attention products `q·kᵀ` and `A·v`: `2·n_t²·d_emb` each over all heads;
    /// * score scaling: 1 per score; softmax: 5 per score (max, subtract, exp,
    ///   sum, divide);
    /// * layer norm: 7 per element; leaky ReLU: 1; sigmoid: 4 (negate, exp,
    ///   add, divide); residual and position-embedding additions: 1.
    pub fn flops_estimate(&self, height: usize, width: usize) -> u64 {
        let bias = self.bias;
        let linear = |rows: usize, inp: usize, out: usize, with_bias: bool| -> u64 {
            (rows * (2 * inp * out + if with_bias { out } else { 0 })) as u64
        };
        let (d, nt, m) = (self.embed_dim, self.n_tokens(), self.block_mlp_dim);
        let (h, g) = (self.hidden_dim, self.gamma);
        let tokens = (nt * d) as u64;
        let scores = (nt * nt * self.heads) as u64;

        let embed = linear(self.groups(), self.group_depth, d, bias) + tokens;
        let block = 2 * 7 * tokens
            + linear(nt, d, 3 * d, self.has_qkv_bias())
            + 2 * (2 * nt * nt * d) as u64
            + scores * (1 + 5)
            + linear(nt, d, d, bias)
            + linear(nt, d, m, bias)
            + (nt * m) as u64
            + linear(nt, m, d, bias)
            + 2 * tokens;
        let encoder_head = linear(1, d, h, bias) + h as u64 + linear(1, h, g, bias) + 4 * g as u64;
        let decoder = linear(1, g, h, bias) + h as u64 + linear(1, h, self.bands, bias) + 4 * self.bands as u64;
        let per_pixel = embed + self.blocks as u64 * block + encoder_head + decoder;
        per_pixel * (height * width) as u64
    }
}

pub fn n_tokens(config: &ModelConfig) -> usize {
    config.n_tokens()
}

pub fn cr_of(config: &ModelConfig) -> CompressionRatio {
    config.cr()
}

pub fn param_count(config: &ModelConfig) -> usize {
    config.param_count()
}

pub fn flops_estimate(config: &ModelConfig, height: usize, width: usize) -> u64 {
    config.flops_estimate(height, width)
}

/// Exact ratio `bands / gamma`, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompressionRatio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl CompressionRatio {
    pub fn new(bands: usize, gamma: usize) -> Self {
        assert!(gamma > 0, "gamma must be positive");
        let (n, d) = (bands as u64, gamma as u64);
        let g = gcd(n, d).max(1);
        CompressionRatio { num: n / g, den: d / g }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Ord for CompressionRatio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl PartialOrd for CompressionRatio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Renders with two decimals unless a precision is given.
impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.*}", p, self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Normal { sd: f64 },
    Ones,
    Zeros,
}

/// Name and shape of one learnable array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1: (usize, usize),
    qkv: LinearIdx,
    proj: LinearIdx,
    ln2: (usize, usize),
    fc1: LinearIdx,
    fc2: LinearIdx,
}

/// Fixed order of the weight arrays. The same order is used for
/// initialization, optimizer state and checkpoint serialization:
///
/// `embed.weight, embed.bias, ct, pos`, then per block
/// `ln1.gain, ln1.bias, qkv.weight, qkv.bias, proj.weight, proj.bias,
/// ln2.gain, ln2.bias, mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight,
/// mlp.fc2.bias`, then `enc.fc1.*, enc.fc2.*, dec.fc1.*, dec.fc2.*`.
/// Bias arrays are omitted when disabled.
#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    embed: LinearIdx,
    ct: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    enc1: LinearIdx,
    enc2: LinearIdx,
    dec1: LinearIdx,
    dec2: LinearIdx,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                          name: &str,
                          inp: usize,
                          out: usize,
                          bias: bool| {
            let w = push(format!("{name}.weight"), vec![inp, out], Init::Uniform { fan_in: inp });
            let b = bias.then(|| push(format!("{name}.bias"), vec![out], Init::Uniform { fan_in: inp }));
            LinearIdx { w, b }
        };
        let d = c.embed_dim;
        let embed = linear(&mut push, "embed", c.group_depth, d, c.bias);
        let ct = push("ct".into(), vec![d], Init::Normal { sd: 0.02 });
        let pos = push("pos".into(), vec![c.n_tokens(), d], Init::Normal { sd: 0.02 });
        let blocks = (0..c.blocks)
            .map(|l| {
                let p = format!("block{l}");
                let ln1 = (
                    push(format!("{p}.ln1.gain"), vec![d], Init::Ones),
                    push(format!("{p}.ln1.bias"), vec![d], Init::Zeros),
                );
                let qkv = linear(&mut push, &format!("{p}.qkv"), d, 3 * d, c.has_qkv_bias());
                let proj = linear(&mut push, &format!("{p}.proj"), d, d, c.bias);
                let ln2 = (
                    push(format!("{p}.ln2.gain"), vec![d], Init::Ones),
                    push(format!("{p}.ln2.bias"), vec![d], Init::Zeros),
                );
                let fc1 = linear(&mut push, &format!("{p}.mlp.fc1"), d, c.block_mlp_dim, c.bias);
                let fc2 = linear(&mut push, &format!("{p}.mlp.fc2"), c.block_mlp_dim, d, c.bias);
                BlockIdx {
                    ln1,
                    qkv,
                    proj,
                    ln2,
                    fc1,
                    fc2,
                }
            })
            .collect();
        let enc1 = linear(&mut push, "enc.fc1", d, c.hidden_dim, c.bias);
        let enc2 = linear(&mut push, "enc.fc2", c.hidden_dim, c.gamma, c.bias);
        let dec1 = linear(&mut push, "dec.fc1", c.gamma, c.hidden_dim, c.bias);
        let dec2 = linear(&mut push, "dec.fc2", c.hidden_dim, c.bands, c.bias);
        Layout {
            specs,
            embed,
            ct,
            pos,
            blocks,
            enc1,
            enc2,
            dec1,
            dec2,
        }
    }
}

/// Every learnable array of a model, in [`ModelWeights::specs`] order.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: ModelConfig,
    layout: Layout,
    arrays: Vec<Vec<f64>>,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.arrays == other.arrays
    }
}

/// Latents of a whole image, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCube {
    pub height: usize,
    pub width: usize,
    pub gamma: usize,
    pub data: Vec<f64>,
}

impl LatentCube {
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.gamma..(index + 1) * self.gamma]
    }
}

/// Model arrays registered as leaves of one graph.
pub struct BoundModel<'a> {
    weights: &'a ModelWeights,
    ids: Vec<NodeId>,
}

impl ModelWeights {
    /// Seeded initialization: linear weights and biases uniform in
    /// `±1/√fan_in`, compression token and positions from `N(0, 0.02²)`,
    /// layer-norm gains 1 and biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let arrays = layout
            .specs
            .iter()
            .map(|spec| {
                let n = spec.len();
                match spec.init {
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Normal { sd } => {
                        let dist = Normal::new(0.0, sd).expect("positive sd");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                }
            })
            .collect();
        Ok(ModelWeights {
            config: config.clone(),
            layout,
            arrays,
        })
    }

    /// All arrays zero, including layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let arrays = layout.specs.iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(ModelWeights {
            config: config.clone(),
            layout,
            arrays,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.arrays
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        let i = self.layout.specs.iter().position(|s| s.name == name)?;
        Some(&self.arrays[i])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let i = self.layout.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.arrays[i])
    }

    /// Allocated scalar count.
    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(Vec::len).sum()
    }

    /// Registers every array as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel<'_> {
        let ids = self
            .layout
            .specs
            .iter()
            .zip(&self.arrays)
            .map(|(spec, values)| {
                let t = Tensor::new(spec.shape.clone(), values.clone()).expect("layout shapes match arrays");
                g.leaf(if trainable { t.with_grad() } else { t })
            })
            .collect();
        BoundModel { weights: self, ids }
    }

    fn check_len(&self, what: &str, got: usize, per_item: usize) -> Result<usize> {
        if per_item == 0 || !got.is_multiple_of(per_item) || got == 0 {
            return Err(Error::Dimension(format!(
                "{what}: {got} values is not a positive multiple of {per_item}"
            )));
        }
        Ok(got / per_item)
    }

    /// Pads `count` spectra to `[count, C_pad]`.
    fn padded_batch(&self, pixels: &[f64]) -> Result<(usize, Vec<f64>)> {
        let c = self.config.bands;
        let count = self.check_len("pixel batch", pixels.len(), c)?;
        let cp = self.config.padded_bands();
        let mut out = vec![0.0; count * cp];
        for (dst, src) in out.chunks_mut(cp).zip(pixels.chunks(c)) {
            dst[..c].copy_from_slice(src);
        }
        Ok((count, out))
    }

    /// Token matrix `[n_t, d_emb]` of one pixel before the transformer.
    pub fn embed_pixel(&self, pixel: &[f64]) -> Result<Tensor> {
        if pixel.len() != self.config.bands {
            return Err(Error::Dimension(format!(
                "pixel has {} bands, model expects {}",
                pixel.len(),
                self.config.bands
            )));
        }
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let (_, padded) = self.padded_batch(pixel)?;
        let x = g.constant(vec![1, self.config.padded_bands()], padded)?;
        let t = m.embed(&mut g, x)?;
        let t = g.reshape(t, vec![self.config.n_tokens(), self.config.embed_dim])?;
        Ok(g.value(t).clone())
    }

    fn run_on_tokens(
        &self,
        tokens: &Tensor,
        f: impl FnOnce(&BoundModel<'_>, &mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<Tensor> {
        let d = self.config.embed_dim;
        if tokens.shape().len() != 2 || tokens.shape()[1] != d {
            return Err(Error::Dimension(format!(
                "token matrix must be [n, {d}], got {:?}",
                tokens.shape()
            )));
        }
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = g.constant(tokens.shape().to_vec(), tokens.values().to_vec())?;
        let y = f(&m, &mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Multi-head self-attention of block `block` on a `[n, d_emb]` token matrix.
    pub fn msa(&self, block: usize, tokens: &Tensor) -> Result<Tensor> {
        self.check_block(block)?;
        self.run_on_tokens(tokens, |m, g, x| m.msa(g, block, x))
    }

    /// One pre-norm transformer block on a `[n, d_emb]` token matrix.
    pub fn transformer_block(&self, block: usize, tokens: &Tensor) -> Result<Tensor> {
        self.check_block(block)?;
        self.run_on_tokens(tokens, |m, g, x| m.block(g, block, x))
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.config.blocks {
            return Err(Error::Dimension(format!(
                "block {block} out of range, model has {}",
                self.config.blocks
            )));
        }
        Ok(())
    }

    pub fn encode_pixel(&self, pixel: &[f64]) -> Result<Vec<f64>> {
        if pixel.len() != self.config.bands {
            return Err(Error::Dimension(format!(
                "pixel has {} bands, model expects {}",
                pixel.len(),
                self.config.bands
            )));
        }
        self.encode_pixels(pixel)
    }

    pub fn decode_pixel(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.config.gamma {
            return Err(Error::Dimension(format!(
                "latent has {} channels, model expects {}",
                latent.len(),
                self.config.gamma
            )));
        }
        self.decode_latents(latent)
    }

    /// Encodes concatenated spectra, returning concatenated latents.
    pub fn encode_pixels(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        let c = self.config.bands;
        self.check_len("pixel batch", pixels.len(), c)?;
        let chunks: Vec<Result<Vec<f64>>> = pixels
            .par_chunks(INFER_CHUNK * c)
            .map(|chunk| {
                let mut g = Graph::new();
                let m = self.bind(&mut g, false);
                let (count, padded) = self.padded_batch(chunk)?;
                let x = g.constant(vec![count, self.config.padded_bands()], padded)?;
                let z = m.encode(&mut g, x)?;
                Ok(g.value(z).values().to_vec())
            })
            .collect();
        flatten(chunks)
    }

    /// Decodes concatenated latents, returning concatenated spectra.
    pub fn decode_latents(&self, latents: &[f64]) -> Result<Vec<f64>> {
        let gamma = self.config.gamma;
        self.check_len("latent batch", latents.len(), gamma)?;
        let chunks: Vec<Result<Vec<f64>>> = latents
            .par_chunks(INFER_CHUNK * gamma)
            .map(|chunk| {
                let mut g = Graph::new();
                let m = self.bind(&mut g, false);
                let z = g.constant(vec![chunk.len() / gamma, gamma], chunk.to_vec())?;
                let y = m.decode(&mut g, z)?;
                Ok(g.value(y).values().to_vec())
            })
            .collect();
        flatten(chunks)
    }

    /// Encodes and decodes every pixel of `cube`.
    pub fn forward_image(&self, cube: &HsiCube) -> Result<(LatentCube, HsiCube)> {
        if cube.bands() != self.config.bands {
            return Err(Error::Config(format!(
                "cube has {} bands, model expects {}",
                cube.bands(),
                self.config.bands
            )));
        }
        let latents = self.encode_pixels(cube.data())?;
        let recon = self.decode_latents(&latents)?;
        let latent = LatentCube {
            height: cube.height(),
            width: cube.width(),
            gamma: self.config.gamma,
            data: latents,
        };
        let recon = HsiCube::with_range(
            cube.height(),
            cube.width(),
            cube.bands(),
            recon,
            cube.raw_min(),
            cube.raw_max(),
        )?;
        Ok((latent, recon))
    }

    /// Checkpoint bytes: magic `HYCW`, version u16, config, each array as
    /// little-endian f32 in layout order, then the FNV-1a hash of everything
    /// before it.
    ///
    /// Config encoding: `bands, group_depth, embed_dim, blocks, heads,
    /// hidden_dim, gamma, block_mlp_dim` as u32, `leaky_slope` as f64, `seed`
    /// as u64, and a flag byte (bit 0 `bias`, bit 1 `qkv_bias`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.bands,
            c.group_depth,
            c.embed_dim,
            c.blocks,
            c.heads,
            c.hidden_dim,
            c.gamma,
            c.block_mlp_dim,
        ] {
            out.extend_from_slice(&dim_u32(v, "config field").expect("validated").to_le_bytes());
        }
        out.extend_from_slice(&c.leaky_slope.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.push(c.bias as u8 | (c.qkv_bias as u8) << 1);
        for a in &self.arrays {
            put_f32s(&mut out, a.iter().map(|&v| v as f32));
        }
        let fp = fnv1a64(&out);
        out.extend_from_slice(&fp.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let leaky_slope = r.f64()?;
        let seed = r.u64()?;
        let flags = r.u8()?;
        let config = ModelConfig {
            bands: dims[0],
            group_depth: dims[1],
            embed_dim: dims[2],
            blocks: dims[3],
            heads: dims[4],
            hidden_dim: dims[5],
            gamma: dims[6],
            block_mlp_dim: dims[7],
            leaky_slope,
            seed,
            bias: flags & 1 != 0,
            qkv_bias: flags & 2 != 0,
        };
        config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let layout = Layout::new(&config);
        let mut arrays = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            arrays.push(r.f32_vec(spec.len())?.into_iter().map(f64::from).collect());
        }
        let body_end = r.position();
        let stored = r.u64()?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        let computed = fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Format(format!(
                "checkpoint fingerprint mismatch: stored {stored:016x}, computed {computed:016x}"
            )));
        }
        Ok(ModelWeights { config, layout, arrays })
    }

    /// FNV-1a hash of the serialized checkpoint body.
    pub fn fingerprint(&self) -> u64 {
        let bytes = self.to_bytes();
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn flatten(chunks: Vec<Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

impl BoundModel<'_> {
    fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn linear(&self, g: &mut Graph, x: NodeId, l: LinearIdx) -> Result<NodeId> {
        Ok(g.linear(x, self.id(l.w), l.b.map(|b| self.id(b)))?)
    }

    /// `[B, C_pad]` padded spectra to `[B, n_t, d_emb]` tokens.
    pub fn embed(&self, g: &mut Graph, padded: NodeId) -> Result<NodeId> {
        let c = self.config();
        let batch = g.value(padded).len() / c.padded_bands();
        let groups = g.reshape(padded, vec![batch, c.groups(), c.group_depth])?;
        let tokens = self.linear(g, groups, self.weights.layout.embed)?;
        let with_ct = g.prepend_row(tokens, self.id(self.weights.layout.ct))?;
        Ok(g.add_broadcast(with_ct, self.id(self.weights.layout.pos))?)
    }

    /// Multi-head self-attention on `[.., n, d_emb]` tokens. Columns of the
    /// fused projection are `[q | k | v]`, and head `h` owns columns
    /// `h·d_h .. (h+1)·d_h` of each part.
    pub fn msa(&self, g: &mut Graph, block: usize, x: NodeId) -> Result<NodeId> {
        let c = self.config();
        let b = &self.weights.layout.blocks[block];
        let (d, dh) = (c.embed_dim, c.head_dim());
        let qkv = self.linear(g, x, b.qkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let q = g.slice_last(qkv, h * dh, dh)?;
            let k = g.slice_last(qkv, d + h * dh, dh)?;
            let v = g.slice_last(qkv, 2 * d + h * dh, dh)?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.batch_matmul(attn, v, false)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
        self.linear(g, cat, b.proj)
    }

    /// Pre-norm residual block.
    pub fn block(&self, g: &mut Graph, block: usize, x: NodeId) -> Result<NodeId> {
        let b = &self.weights.layout.blocks[block];
        let slope = self.config().leaky_slope;
        let n1 = g.layer_norm(x, self.id(b.ln1.0), self.id(b.ln1.1), LN_EPS)?;
        let a = self.msa(g, block, n1)?;
        let x1 = g.add(a, x)?;
        let n2 = g.layer_norm(x1, self.id(b.ln2.0), self.id(b.ln2.1), LN_EPS)?;
        let h = self.linear(g, n2, b.fc1)?;
        let h = g.leaky_relu(h, slope);
        let h = self.linear(g, h, b.fc2)?;
        Ok(g.add(h, x1)?)
    }

    /// `[B, C_pad]` padded spectra to `[B, gamma]` latents.
    pub fn encode(&self, g: &mut Graph, padded: NodeId) -> Result<NodeId> {
        let layout = &self.weights.layout;
        let mut t = self.embed(g, padded)?;
        for l in 0..self.config().blocks {
            t = self.block(g, l, t)?;
        }
        let ct = g.select_row(t, 0)?;
        let h = self.linear(g, ct, layout.enc1)?;
        let h = g.leaky_relu(h, self.config().leaky_slope);
        let z = self.linear(g, h, layout.enc2)?;
        Ok(g.sigmoid(z))
    }

    /// `[B, gamma]` latents to `[B, C]` spectra.
    pub fn decode(&self, g: &mut Graph, latent: NodeId) -> Result<NodeId> {
        let layout = &self.weights.layout;
        let h = self.linear(g, latent, layout.dec1)?;
        let h = g.leaky_relu(h, self.config().leaky_slope);
        let y = self.linear(g, h, layout.dec2)?;
        Ok(g.sigmoid(y))
    }
}

impl ModelWeights {
    /// Builds a differentiable graph computing the reconstruction MSE of a
    /// batch of spectra. Returns the graph, the parameter leaves in layout
    /// order, and the loss node.
    pub fn loss_graph(&self, pixels: &[f64]) -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let (count, padded) = self.padded_batch(pixels)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, true);
        let x = g.constant(vec![count, self.config.padded_bands()], padded)?;
        let z = m.encode(&mut g, x)?;
        let y = m.decode(&mut g, z)?;
        let target = g.constant(vec![count, self.config.bands], pixels.to_vec())?;
        let loss = g.mse_loss(y, target)?;
        let ids = m.ids;
        Ok((g, ids, loss))
    }
}

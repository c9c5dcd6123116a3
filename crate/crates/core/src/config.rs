//! Run configuration: `key = value` text files merged with overrides.
//!
//! Every randomised component draws its seed from the single run seed via
//! [`derive_seed`] with a fixed tag: `synth`, `split`, `model`, `train`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::SynthParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{derive_seed, TrainConfig};

pub const SEED_TAG_SYNTH: &str = "synth";
pub const SEED_TAG_SPLIT: &str = "split";
pub const SEED_TAG_MODEL: &str = "model";
pub const SEED_TAG_TRAIN: &str = "train";

/// Recognised keys, in the order they are rendered.
pub const KEYS: &[&str] = &[
    "bands",
    "group_depth",
    "embed_dim",
    "blocks",
    "heads",
    "hidden_dim",
    "gamma",
    "block_mlp_dim",
    "leaky_slope",
    "bias",
    "qkv_bias",
    "lr",
    "epochs",
    "batch_pixels",
    "r",
    "beta1",
    "beta2",
    "adam_eps",
    "checkpoint_every",
    "cubes",
    "height",
    "width",
    "endmembers",
    "noise_sd",
    "seed",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bands: usize,
    pub group_depth: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub gamma: usize,
    pub block_mlp_dim: usize,
    pub leaky_slope: f64,
    pub bias: bool,
    pub qkv_bias: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    pub r: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub cubes: usize,
    pub height: usize,
    pub width: usize,
    pub endmembers: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            bands: m.bands,
            group_depth: m.group_depth,
            embed_dim: m.embed_dim,
            blocks: m.blocks,
            heads: m.heads,
            hidden_dim: m.hidden_dim,
            gamma: m.gamma,
            block_mlp_dim: m.block_mlp_dim,
            leaky_slope: m.leaky_slope,
            bias: m.bias,
            qkv_bias: m.qkv_bias,
            lr: t.lr,
            epochs: t.epochs,
            batch_pixels: t.batch_pixels,
            r: t.reduction,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.eps,
            checkpoint_every: t.checkpoint_every,
            cubes: 12,
            height: 16,
            width: 16,
            endmembers: 6,
            noise_sd: 0.01,
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "bands" => self.bands = parse(key, v)?,
            "group_depth" => self.group_depth = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "block_mlp_dim" => self.block_mlp_dim = parse(key, v)?,
            "leaky_slope" => self.leaky_slope = parse(key, v)?,
            "bias" => self.bias = parse(key, v)?,
            "qkv_bias" => self.qkv_bias = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_pixels" => self.batch_pixels = parse(key, v)?,
            "r" => self.r = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "cubes" => self.cubes = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "size" => {
                self.height = parse(key, v)?;
                self.width = self.height;
            }
            "endmembers" => self.endmembers = parse(key, v)?,
            "noise_sd" => self.noise_sd = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Renders every key, readable back by [`RunConfig::parse`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "bands" => self.bands.to_string(),
            "group_depth" => self.group_depth.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "blocks" => self.blocks.to_string(),
            "heads" => self.heads.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "gamma" => self.gamma.to_string(),
            "block_mlp_dim" => self.block_mlp_dim.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "bias" => self.bias.to_string(),
            "qkv_bias" => self.qkv_bias.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_pixels" => self.batch_pixels.to_string(),
            "r" => self.r.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "cubes" => self.cubes.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "endmembers" => self.endmembers.to_string(),
            "noise_sd" => self.noise_sd.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            bands: self.bands,
            group_depth: self.group_depth,
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            gamma: self.gamma,
            block_mlp_dim: self.block_mlp_dim,
            leaky_slope: self.leaky_slope,
            seed: derive_seed(self.seed, SEED_TAG_MODEL),
            bias: self.bias,
            qkv_bias: self.qkv_bias,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_pixels: self.batch_pixels,
            reduction: self.r,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            seed: derive_seed(self.seed, SEED_TAG_TRAIN),
            checkpoint_every: self.checkpoint_every,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn synth_params(&self) -> Result<SynthParams> {
        if self.cubes < 3 {
            return Err(Error::Config(format!(
                "need at least 3 cubes for a train/val/test split, got {}",
                self.cubes
            )));
        }
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("bands, height and width must be positive".into()));
        }
        Ok(SynthParams {
            cubes: self.cubes,
            height: self.height,
            width: self.width,
            bands: self.bands,
            endmembers: self.endmembers,
            noise_sd: self.noise_sd,
            seed: derive_seed(self.seed, SEED_TAG_SYNTH),
        })
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_TAG_SPLIT)
    }
}

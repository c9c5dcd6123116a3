//! Adam optimisation of the autoencoder on randomly subsampled pixels.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::fnv1a64;
use crate::dataio::HsiCube;
use crate::error::{Error, Result};
use crate::metrics::{format_db, psnr, DEFAULT_PEAK};
use crate::model::ModelWeights;
use crate::tensor::{Graph, NodeId};

pub const LOG_HEADER: &str = "epoch,train_mse,val_psnr_db,seconds";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_FILE: &str = "best.hycw";
pub const LAST_FILE: &str = "last.hycw";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    /// Pixel reduction factor r: each epoch visits ceil(H·W / r) pixels per cube.
    pub reduction: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write `last.hycw` every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_pixels: 4096,
            reduction: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction factor r must be >= 1".into()));
        }
        if self.batch_pixels == 0 {
            return Err(Error::Config("batch_pixels must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Derives an independent seed for a named component from a run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}

/// Number of pixels drawn per cube and epoch.
pub fn pixels_per_epoch(pixel_count: usize, reduction: usize) -> usize {
    pixel_count.div_ceil(reduction.max(1)).max(1)
}

/// Draws ceil(H·W / r) distinct pixel indices, uniformly without replacement.
pub fn sample_pixel_indices(cube: &HsiCube, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if reduction == 0 {
        return Err(Error::Config("reduction factor r must be >= 1".into()));
    }
    let total = cube.pixel_count();
    let n = pixels_per_epoch(total, reduction).min(total);
    Ok(index::sample(rng, total, n).into_vec())
}

/// Sampled spectra, flattened row-major as `[n, C]`.
pub fn sample_pixels(cube: &HsiCube, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let idx = sample_pixel_indices(cube, reduction, rng)?;
    Ok(cube.gather(&idx))
}

/// Mean squared error node between a reconstruction and its target.
pub fn mse_loss(g: &mut Graph, reconstruction: NodeId, target: NodeId) -> Result<NodeId> {
    Ok(g.mse_loss(reconstruction, target)?)
}

/// First and second moment estimates for every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Vec<f64>>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update. Every parameter must have a gradient.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} params, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        match g {
            None => return Err(Error::Contract(format!("parameter {i} has no gradient"))),
            Some(g) if g.len() != p.len() => {
                return Err(Error::Contract(format!(
                    "gradient {i} has {} entries, parameter has {}",
                    g.len(),
                    p.len()
                )))
            }
            _ => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.expect("checked above");
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Anything that maps a cube to its reconstruction.
pub trait Reconstruct {
    fn reconstruct(&self, cube: &HsiCube) -> Result<HsiCube>;
}

impl Reconstruct for ModelWeights {
    fn reconstruct(&self, cube: &HsiCube) -> Result<HsiCube> {
        Ok(self.forward_image(cube)?.1)
    }
}

/// Mean PSNR (peak 1) over a set of cubes. Infinite if any cube is
/// reconstructed exactly.
pub fn evaluate<R: Reconstruct + ?Sized>(cubes: &[HsiCube], model: &R) -> Result<f64> {
    if cubes.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for cube in cubes {
        let rec = model.reconstruct(cube)?;
        total += psnr(cube, &rec, DEFAULT_PEAK)?;
    }
    Ok(total / cubes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_psnr_db: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.8e},{},{:.3}",
            self.epoch,
            self.train_mse,
            format_db(self.val_psnr_db),
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelWeights,
    pub last: ModelWeights,
    pub best_epoch: usize,
    pub best_val_psnr_db: f64,
    pub steps: usize,
    pub log: Vec<EpochRecord>,
}

fn check_bands(cubes: &[HsiCube], bands: usize, what: &str) -> Result<()> {
    for (i, c) in cubes.iter().enumerate() {
        if c.bands() != bands {
            return Err(Error::Config(format!(
                "{what} cube {i} has {} bands, model expects {bands}",
                c.bands()
            )));
        }
    }
    Ok(())
}

/// Runs one optimisation step on a batch of spectra and returns its loss.
pub fn train_step(weights: &mut ModelWeights, state: &mut AdamState, pixels: &[f64], cfg: &TrainConfig) -> Result<f64> {
    let (mut g, ids, loss) = weights.loss_graph(pixels)?;
    g.backward(loss)?;
    let value = g.value(loss).values()[0];
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| g.grad(id)).collect();
    adam_step(weights.arrays_mut(), &grads, state, cfg)?;
    Ok(value)
}

/// Trains `weights` on `train`, validating on `val` after every epoch. When
/// `out_dir` is given, the epoch log and checkpoints are written there.
pub fn train(
    train: &[HsiCube],
    val: &[HsiCube],
    weights: ModelWeights,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let bands = weights.config().bands;
    check_bands(train, bands, "training")?;
    check_bands(val, bands, "validation")?;

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            drop(f);
            Some(OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = weights;
    let mut state = AdamState::new(weights.arrays());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = weights.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut steps = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for &ci in &order {
            let cube = &train[ci];
            let idx = sample_pixel_indices(cube, cfg.reduction, &mut rng)?;
            for chunk in idx.chunks(cfg.batch_pixels) {
                let pixels = cube.gather(chunk);
                let loss = train_step(&mut weights, &mut state, &pixels, cfg)?;
                loss_sum += loss * chunk.len() as f64;
                seen += chunk.len();
                steps += 1;
            }
        }
        let val_psnr = evaluate(val, &weights)?;
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / seen as f64,
            val_psnr_db: val_psnr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if val_psnr > best_val {
            best_val = val_psnr;
            best_epoch = epoch;
            best = weights.clone();
            if let Some(dir) = out_dir {
                best.save(dir.join(BEST_FILE))?;
            }
        }
        if let (Some(dir), Some(f)) = (out_dir, log_file.as_mut()) {
            let path = dir.join(LOG_FILE);
            writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(&path, e))?;
            let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if periodic || epoch == cfg.epochs {
                weights.save(dir.join(LAST_FILE))?;
            }
        }
        log.push(record);
    }
    if cfg.epochs == 0 {
        best_val = evaluate(val, &weights)?;
        if let Some(dir) = out_dir {
            weights.save(dir.join(BEST_FILE))?;
            weights.save(dir.join(LAST_FILE))?;
        }
    }

    Ok(TrainOutcome {
        best,
        last: weights,
        best_epoch,
        best_val_psnr_db: best_val,
        steps,
        log,
    })
}

/// Path of the best checkpoint inside a training output directory.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join(BEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn adam_matches_hand_iterates_on_square() {
        // f(w) = w², w0 = 1, lr 0.1; values from an independent float64 recurrence.
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let mut params = vec![vec![1.0]];
        let mut state = AdamState::new(&params);
        let expected = [0.9000000005, 0.8004122286917928, 0.7015862729460303, 0.603939060573746, 0.507963659264342];
        for want in expected {
            let g = vec![2.0 * params[0][0]];
            adam_step(&mut params, &[Some(&g)], &mut state, &cfg).unwrap();
            assert!((params[0][0] - want).abs() < 1e-12, "{} vs {want}", params[0][0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        let mut params = vec![vec![3.0, -2.0, 0.5]];
        let mut state = AdamState::new(&params);
        let g = vec![4.0, -0.001, 0.0];
        adam_step(&mut params, &[Some(&g)], &mut state, &cfg).unwrap();
        assert!((params[0][0] - 2.99).abs() < 1e-9);
        assert!((params[0][1] + 1.99).abs() < 1e-6);
        assert_eq!(params[0][2], 0.5);
    }

    #[test]
    fn adam_rejects_missing_gradient() {
        let cfg = TrainConfig::default();
        let mut params = vec![vec![1.0], vec![2.0]];
        let mut state = AdamState::new(&params);
        let g = vec![1.0];
        let err = adam_step(&mut params, &[Some(&g), None], &mut state, &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(params, vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn sample_counts_and_distinctness() {
        let cube = HsiCube::new(10, 10, 2, vec![0.5; 200]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, n) in [(1, 100), (3, 34), (64, 2), (1000, 1)] {
            let mut idx = sample_pixel_indices(&cube, r, &mut rng).unwrap();
            assert_eq!(idx.len(), n);
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), n);
        }
        assert!(sample_pixel_indices(&cube, 0, &mut rng).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, "model"), derive_seed(7, "train"));
        assert_eq!(derive_seed(7, "model"), derive_seed(7, "model"));
    }

    #[test]
    fn train_rejects_band_mismatch_and_empty_sets() {
        let cfg = ModelConfig {
            bands: 8,
            group_depth: 4,
            embed_dim: 4,
            blocks: 1,
            heads: 1,
            hidden_dim: 4,
            gamma: 2,
            block_mlp_dim: 4,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let good = HsiCube::new(2, 2, 8, vec![0.3; 32]).unwrap();
        let bad = HsiCube::new(2, 2, 6, vec![0.3; 24]).unwrap();
        let t = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(train(&[], &[good.clone()], w.clone(), &t, None), Err(Error::Config(_))));
        assert!(matches!(train(&[bad], &[good.clone()], w.clone(), &t, None), Err(Error::Config(_))));
        assert!(train(&[good.clone()], &[good], w, &t, None).is_ok());
    }
}

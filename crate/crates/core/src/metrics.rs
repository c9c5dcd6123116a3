//! Reconstruction quality, rate-distortion sweeps and complexity tables.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use crate::dataio::HsiCube;
use crate::error::{Error, Result};
use crate::model::{CompressionRatio, ModelConfig, ModelWeights};
use crate::training::{evaluate, train, TrainConfig};

pub const DEFAULT_PEAK: f64 = 1.0;
pub const RD_HEADER: &str = "label,gamma,cr,psnr_db";
pub const COMPLEXITY_HEADER: &str = "label,gamma,cr,flops,params";

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("mse over {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Dimension("mse of empty input".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// 10·log10(peak² / mse); `+inf` when mse is zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR over all pixels and bands of two equally shaped cubes.
pub fn psnr(original: &HsiCube, reconstruction: &HsiCube, peak: f64) -> Result<f64> {
    let (a, b) = (original, reconstruction);
    if (a.height(), a.width(), a.bands()) != (b.height(), b.width(), b.bands()) {
        return Err(Error::Dimension(format!(
            "psnr of {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.bands(),
            b.height(),
            b.width(),
            b.bands()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a.data(), b.data())?, peak))
}

/// Decibels with four decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub gamma: usize,
    pub cr: CompressionRatio,
    pub psnr_db: f64,
}

impl RdPoint {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.label, self.gamma, self.cr, format_db(self.psnr_db))
    }
}

pub fn render_rd_table(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&p.to_line());
        out.push('\n');
    }
    out
}

/// Where the sweep gets its models from.
#[derive(Debug, Clone, Copy)]
pub enum SweepMode<'a> {
    /// Train one model per Γ; checkpoints are written to the directory if given.
    Train { checkpoint_dir: Option<&'a Path> },
    /// Only load `gamma_<Γ>.hycw` from the directory.
    LoadOnly { checkpoint_dir: &'a Path },
}

pub struct SweepData<'a> {
    pub train: &'a [HsiCube],
    pub val: &'a [HsiCube],
    pub test: &'a [HsiCube],
}

pub fn checkpoint_path(dir: &Path, gamma: usize) -> PathBuf {
    dir.join(format!("gamma_{gamma}.hycw"))
}

/// Test-set PSNR for every Γ, sorted by compression ratio.
pub fn rd_sweep(
    data: &SweepData<'_>,
    base: &ModelConfig,
    gammas: &[usize],
    tcfg: &TrainConfig,
    mode: SweepMode<'_>,
    label: &str,
) -> Result<Vec<RdPoint>> {
    if gammas.is_empty() {
        return Err(Error::Config("rd sweep needs at least one gamma".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Config("rd sweep needs a non-empty test set".into()));
    }
    let configs: Vec<ModelConfig> = gammas
        .iter()
        .map(|&gamma| {
            let c = ModelConfig { gamma, ..base.clone() };
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;

    if let SweepMode::LoadOnly { checkpoint_dir } = mode {
        let missing: Vec<usize> = gammas
            .iter()
            .copied()
            .filter(|&g| !checkpoint_path(checkpoint_dir, g).is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCheckpoints(missing));
        }
    }

    let mut points = Vec::with_capacity(configs.len());
    for cfg in configs {
        let model = match mode {
            SweepMode::LoadOnly { checkpoint_dir } => {
                let m = ModelWeights::load(checkpoint_path(checkpoint_dir, cfg.gamma))?;
                if m.config().gamma != cfg.gamma || m.config().bands != cfg.bands {
                    return Err(Error::Config(format!(
                        "checkpoint for gamma {} holds a model with gamma {} and {} bands",
                        cfg.gamma,
                        m.config().gamma,
                        m.config().bands
                    )));
                }
                m
            }
            SweepMode::Train { checkpoint_dir } => {
                let run_dir = checkpoint_dir.map(|d| d.join(format!("gamma_{}", cfg.gamma)));
                let init = ModelWeights::init(&cfg)?;
                let outcome = train(data.train, data.val, init, tcfg, run_dir.as_deref())?;
                if let Some(dir) = checkpoint_dir {
                    outcome.best.save(checkpoint_path(dir, cfg.gamma))?;
                }
                // f32 round-trip, as stored on disk
                ModelWeights::from_bytes(&outcome.best.to_bytes())?
            }
        };
        points.push(RdPoint {
            label: label.to_string(),
            gamma: cfg.gamma,
            cr: cfg.cr(),
            psnr_db: evaluate(data.test, &model)?,
        });
    }
    points.sort_by(|a, b| a.cr.cmp(&b.cr).then(a.gamma.cmp(&b.gamma)));
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub label: String,
    pub gamma: usize,
    pub cr: CompressionRatio,
    pub flops: u64,
    pub params: usize,
}

impl ComplexityRow {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{},{}", self.label, self.gamma, self.cr, self.flops, self.params)
    }
}

/// FLOPs for an H×W image and parameter count per configuration, ordered by
/// compression ratio.
pub fn complexity_report(configs: &[(String, ModelConfig)], height: usize, width: usize) -> Result<Vec<ComplexityRow>> {
    let mut rows = configs
        .iter()
        .map(|(label, c)| {
            c.validate()?;
            Ok(ComplexityRow {
                label: label.clone(),
                gamma: c.gamma,
                cr: c.cr(),
                flops: c.flops_estimate(height, width),
                params: c.param_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| match a.cr.cmp(&b.cr) {
        Ordering::Equal => a.gamma.cmp(&b.gamma),
        o => o,
    });
    Ok(rows)
}

pub fn render_complexity_table(rows: &[ComplexityRow]) -> String {
    let mut out = String::from(COMPLEXITY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

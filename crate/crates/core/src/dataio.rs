//! Hyperspectral cube container, the `HSC1` raster format, normalization,
//! synthetic data generation and dataset splitting.
//!
//! `HSC1` layout (all integers and reals little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `HSC1`                   |
//! | 4      | 2    | version (u16, currently 1)     |
//! | 6      | 12   | H, W, C (u32 each)             |
//! | 18     | 16   | raw_min, raw_max (f64 each)    |
//! | 34     | 4·HWC| samples as f32, band-innermost |

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

use crate::binio::{dim_u32, put_f32s, Reader};
use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const CUBE_VERSION: u16 = 1;
pub const CUBE_HEADER_BYTES: usize = 4 + 2 + 12 + 16;

/// H×W×C cube of normalized samples, stored pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
    raw_min: f64,
    raw_max: f64,
}

impl HsiCube {
    /// Builds a cube from normalized data in `[0, 1]` with identity
    /// de-normalization metadata.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_range(height, width, bands, data, 0.0, 1.0)
    }

    pub fn with_range(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f64>,
        raw_min: f64,
        raw_max: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Dimension(format!(
                "cube extents must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "cube {height}x{width}x{bands} needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("sample {bad} outside [0, 1]")));
        }
        if !(raw_min.is_finite() && raw_max.is_finite() && raw_min < raw_max) {
            return Err(Error::Contract(format!(
                "invalid de-normalization range [{raw_min}, {raw_max}]"
            )));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
            raw_min,
            raw_max,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn raw_min(&self) -> f64 {
        self.raw_min
    }

    pub fn raw_max(&self) -> f64 {
        self.raw_max
    }

    /// Spectrum of pixel `index` in row-major pixel order.
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.bands..(index + 1) * self.bands]
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    /// Concatenated spectra of the given pixels.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.bands);
        for &i in indices {
            out.extend_from_slice(self.pixel(i));
        }
        out
    }

    /// Sample values mapped back to the raw range.
    pub fn denormalized(&self) -> Vec<f64> {
        denormalize(&self.data, self.raw_min, self.raw_max).expect("range validated at construction")
    }
}

/// Serializes a cube to `HSC1` bytes.
pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(CUBE_HEADER_BYTES + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for (v, what) in [(cube.height, "height"), (cube.width, "width"), (cube.bands, "bands")] {
        out.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&cube.raw_min.to_le_bytes());
    out.extend_from_slice(&cube.raw_max.to_le_bytes());
    put_f32s(&mut out, cube.data.iter().map(|&v| v as f32));
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != CUBE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "HSC1"
        )));
    }
    let version = r.u16()?;
    if version != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported HSC1 version {version}")));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let (raw_min, raw_max) = (r.f64()?, r.f64()?);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("cube extents overflow".into()))?;
    let data = r.f32_vec(n)?.into_iter().map(f64::from).collect();
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after payload", r.remaining())));
    }
    HsiCube::with_range(h, w, c, data, raw_min, raw_max).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

/// Maps raw values to `[0, 1]`, clipping anything outside `[min, max]`.
pub fn normalize(raw: &[f64], min: f64, max: f64) -> Result<Vec<f64>> {
    check_range(min, max)?;
    let span = max - min;
    Ok(raw.iter().map(|&x| ((x - min) / span).clamp(0.0, 1.0)).collect())
}

pub fn denormalize(values: &[f64], min: f64, max: f64) -> Result<Vec<f64>> {
    check_range(min, max)?;
    let span = max - min;
    Ok(values.iter().map(|&v| min + v * span).collect())
}

fn check_range(min: f64, max: f64) -> Result<()> {
    if !(max > min) {
        return Err(Error::Contract(format!("normalization needs max > min, got [{min}, {max}]")));
    }
    Ok(())
}

/// Synthetic linear-mixture dataset together with the endmembers used.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub cubes: Vec<HsiCube>,
    pub endmembers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub cubes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmembers: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Smooth spectrum built from a few Gaussian absorption/reflectance bumps,
/// rescaled to a random sub-interval of `[0.05, 0.95]`.
fn smooth_spectrum(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let bumps = 3;
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let slope = rng.random_range(-0.5..0.5);
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            slope * t
                + params
                    .iter()
                    .map(|(c, w, a)| a * (-((t - c) / w).powi(2) / 2.0).exp())
                    .sum::<f64>()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let out_lo = rng.random_range(0.05..0.4);
    let out_hi = rng.random_range(0.6..0.95);
    raw.iter()
        .map(|&v| {
            if hi > lo {
                out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
            } else {
                (out_lo + out_hi) / 2.0
            }
        })
        .collect()
}

/// Generates cubes whose pixels are convex mixtures of shared smooth
/// endmember spectra plus clipped Gaussian noise. Deterministic per seed.
pub fn synth_dataset_with_endmembers(p: &SynthParams) -> Result<SyntheticSet> {
    if p.endmembers == 0 {
        return Err(Error::Config("at least one endmember is required".into()));
    }
    if p.height == 0 || p.width == 0 || p.bands == 0 {
        return Err(Error::Config("synthetic cube extents must be positive".into()));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(Error::Config(format!("invalid noise_sd {}", p.noise_sd)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let endmembers: Vec<Vec<f64>> = (0..p.endmembers).map(|_| smooth_spectrum(&mut rng, p.bands)).collect();
    let noise = Normal::new(0.0, p.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut cubes = Vec::with_capacity(p.cubes);
    for _ in 0..p.cubes {
        let mut data = Vec::with_capacity(p.height * p.width * p.bands);
        let mut weights = vec![0.0; p.endmembers];
        for _ in 0..p.height * p.width {
            for w in weights.iter_mut() {
                *w = Exp1.sample(&mut rng);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            for b in 0..p.bands {
                let mut v: f64 = weights.iter().zip(&endmembers).map(|(w, e)| w * e[b]).sum();
                if p.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
        cubes.push(HsiCube::new(p.height, p.width, p.bands, data)?);
    }
    Ok(SyntheticSet { cubes, endmembers })
}

pub fn synth_dataset(
    n_cubes: usize,
    height: usize,
    width: usize,
    bands: usize,
    n_endmembers: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<HsiCube>> {
    Ok(synth_dataset_with_endmembers(&SynthParams {
        cubes: n_cubes,
        height,
        width,
        bands,
        endmembers: n_endmembers,
        noise_sd,
        seed,
    })?
    .cubes)
}

/// Indices of cubes assigned to each part of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(SplitLabel, &[usize]); 3] {
        [
            (SplitLabel::Train, &self.train),
            (SplitLabel::Val, &self.val),
            (SplitLabel::Test, &self.test),
        ]
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.2, 0.1];

/// Random disjoint partition of `n` cubes. Part sizes follow the largest
/// remainder rule, and every part receives at least one cube.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if n < fractions.len() {
        return Err(Error::Config(format!(
            "cannot split {n} cubes into {} non-empty parts",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        sizes[i] += 1;
        missing -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = index::sample(&mut rng, n, n).into_vec();
    let (a, rest) = perm.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: sorted(a),
        val: sorted(b),
        test: sorted(c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "val" => Ok(SplitLabel::Val),
            "test" => Ok(SplitLabel::Test),
            other => Err(Error::Format(format!("unknown split label {other:?}"))),
        }
    }
}

/// Plain-text dataset manifest: one `<label> <path>` line per cube, paths
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<(SplitLabel, PathBuf)>,
}

impl Manifest {
    pub fn paths(&self, label: SplitLabel) -> impl Iterator<Item = &Path> {
        self.entries
            .iter()
            .filter(move |(l, _)| *l == label)
            .map(|(_, p)| p.as_path())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(l, p)| format!("{} {}\n", l.as_str(), p.display()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, path) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected `<split> <path>`", no + 1)))?;
            entries.push((label.parse()?, PathBuf::from(path.trim())));
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Loads every cube of one split, resolving paths against `base`.
    pub fn load(&self, base: &Path, label: SplitLabel) -> Result<Vec<HsiCube>> {
        self.paths(label).map(|p| read_cube(base.join(p))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(h: usize, w: usize, c: usize) -> HsiCube {
        let n = h * w * c;
        HsiCube::new(h, w, c, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn cube_roundtrip_is_bitwise() {
        let c = HsiCube::with_range(1, 1, 3, vec![0.0, 0.25, 1.0], -3.0, 7.5).unwrap();
        let bytes = encode_cube(&c).unwrap();
        assert_eq!(bytes.len(), CUBE_HEADER_BYTES + 12);
        let back = decode_cube(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_cube(&back).unwrap(), bytes);
    }

    #[test]
    fn header_size_for_full_scale_cube() {
        assert_eq!(CUBE_HEADER_BYTES, 34);
        let c = cube(2, 3, 4);
        let bytes = encode_cube(&c).unwrap();
        assert_eq!(&bytes[..4], b"HSC1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 4);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let mut bytes = encode_cube(&cube(2, 2, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(&bad), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_cube(&bad_version), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_cube(&bytes), Err(Error::Length { .. })));
    }

    #[test]
    fn normalize_examples() {
        let v = normalize(&[2.0, 6.0, 7.0, 0.0], 2.0, 6.0).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 1.0, 0.0]);
        let xs = [2.0, 3.3, 4.7, 6.0];
        let back = denormalize(&normalize(&xs, 2.0, 6.0).unwrap(), 2.0, 6.0).unwrap();
        for (a, b) in xs.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(normalize(&xs, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn cube_rejects_out_of_range_samples() {
        assert!(HsiCube::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(HsiCube::new(1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn synth_single_endmember_without_noise_is_constant() {
        let cubes = synth_dataset(2, 3, 3, 10, 1, 0.0, 5).unwrap();
        let first = cubes[0].pixel(0).to_vec();
        for c in &cubes {
            for i in 0..c.pixel_count() {
                assert_eq!(c.pixel(i), &first[..]);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_dataset(3, 4, 5, 16, 4, 0.05, 42).unwrap();
        let b = synth_dataset(3, 4, 5, 16, 4, 0.05, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|c| c.data()).all(|v| (0.0..=1.0).contains(v)));
        let c = synth_dataset(3, 4, 5, 16, 4, 0.05, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let s = split_dataset(10, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
        let s = split_dataset(16, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (11, 3, 2));
        let s = split_dataset(3, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert!(matches!(split_dataset(2, DEFAULT_FRACTIONS, 1), Err(Error::Config(_))));
        assert!(split_dataset(10, [0.5, 0.2, 0.1], 1).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest {
            entries: vec![
                (SplitLabel::Train, PathBuf::from("cube_000.hsc")),
                (SplitLabel::Test, PathBuf::from("cube_001.hsc")),
            ],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("holdout a.hsc").is_err());
        assert_eq!(m.paths(SplitLabel::Test).count(), 1);
    }
}

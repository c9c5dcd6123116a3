use hycot::codec::{compress, decompress, CompressedImage, CONTAINER_HEADER_BYTES};
use hycot::dataio::{synth_dataset, HsiCube};
use hycot::metrics::{mse, psnr, psnr_from_mse, rd_sweep, SweepData, SweepMode};
use hycot::tensor::Graph;
use hycot::training::{
    adam_step, evaluate, mse_loss, pixels_per_epoch, train, train_step, AdamState, Reconstruct,
};
use hycot::{Error, ModelConfig, ModelWeights, TrainConfig};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(bands: usize, gamma: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        bands,
        group_depth: 4,
        embed_dim: 8,
        blocks: 1,
        heads: 2,
        hidden_dim: 32,
        gamma,
        block_mlp_dim: 16,
        seed,
        ..ModelConfig::default()
    }
}

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> HsiCube {
    HsiCube::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

struct Identity;

impl Reconstruct for Identity {
    fn reconstruct(&self, cube: &HsiCube) -> hycot::Result<HsiCube> {
        Ok(cube.clone())
    }
}

struct Constant(f64);

impl Reconstruct for Constant {
    fn reconstruct(&self, cube: &HsiCube) -> hycot::Result<HsiCube> {
        HsiCube::new(cube.height(), cube.width(), cube.bands(), vec![self.0; cube.data().len()])
    }
}

#[test]
fn pixels_per_epoch_examples() {
    assert_eq!(pixels_per_epoch(128 * 128, 64), 256);
    assert_eq!(pixels_per_epoch(128 * 128, 1), 16384);
    assert_eq!(pixels_per_epoch(128 * 128, 16384), 1);
    assert_eq!(pixels_per_epoch(64, 1000), 1);
}

#[test]
fn mse_examples_and_two_pass_oracle() {
    let a = [0.1, 0.2, 0.3];
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
    assert!((mse(&shifted, &a).unwrap() - 0.0625).abs() < 1e-15);
    assert!(matches!(mse(&a, &a[..2]), Err(Error::Dimension(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let oracle = (DVector::from_vec(x.clone()) - DVector::from_vec(y.clone())).norm_squared() / 500.0;
    assert!((mse(&x, &y).unwrap() - oracle).abs() < 1e-12);

    let mut g = Graph::new();
    let xn = g.constant(vec![50, 10], x.clone()).unwrap();
    let yn = g.constant(vec![50, 10], y.clone()).unwrap();
    let l = mse_loss(&mut g, xn, yn).unwrap();
    assert!((g.value(l).values()[0] - oracle).abs() < 1e-12);
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let cfg = TrainConfig { lr: 0.05, ..TrainConfig::default() };
    let mut params = vec![vec![1.5, -0.5]];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[Some(&[0.0, 0.0])], &mut state, &cfg).unwrap();
    assert_eq!(params, vec![vec![1.5, -0.5]]);
    assert_eq!(state.t, 1);

    let mut params = vec![vec![0.0, 0.0, 0.0]];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[Some(&[3.0, -0.2, 1e-3])], &mut state, &cfg).unwrap();
    for (p, s) in params[0].iter().zip([-1.0, 1.0, -1.0]) {
        assert!((p - s * cfg.lr).abs() < 1e-6, "{p}");
    }
}

#[test]
fn single_pixel_memorisation() {
    let cfg = ModelConfig {
        bands: 8,
        group_depth: 4,
        embed_dim: 4,
        blocks: 1,
        heads: 2,
        hidden_dim: 8,
        gamma: 8,
        block_mlp_dim: 8,
        seed: 2,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cube = HsiCube::new(1, 1, 8, (0..8).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
    let mut w = ModelWeights::init(&cfg).unwrap();
    let mut state = AdamState::new(w.arrays());
    let t = TrainConfig { lr: 1e-2, ..TrainConfig::default() };
    for _ in 0..500 {
        let loss = train_step(&mut w, &mut state, cube.data(), &t).unwrap();
        assert!(loss.is_finite());
    }
    let db = psnr(&cube, &w.forward_image(&cube).unwrap().1, 1.0).unwrap();
    assert!(db > 60.0, "{db}");
}

#[test]
fn training_loss_stays_finite_on_synthetic_data() {
    let cubes = synth_dataset(4, 6, 6, 16, 3, 0.02, 3).unwrap();
    let t = TrainConfig { epochs: 20, reduction: 2, seed: 4, ..TrainConfig::default() };
    let out = train(&cubes[..3], &cubes[3..], ModelWeights::init(&small(16, 4, 8)).unwrap(), &t, None).unwrap();
    assert_eq!(out.log.len(), 20);
    assert!(out.log.iter().all(|r| r.train_mse.is_finite() && r.val_psnr_db.is_finite()));
    assert!(out.log.last().unwrap().train_mse < out.log[0].train_mse);
    assert_eq!(out.best_val_psnr_db, out.log[out.best_epoch - 1].val_psnr_db);
}

#[test]
fn evaluate_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cubes: Vec<HsiCube> = (0..3).map(|_| random_cube(&mut rng, 3, 2, 5)).collect();
    assert_eq!(evaluate(&cubes, &Identity).unwrap(), f64::INFINITY);
    let flat = vec![HsiCube::new(2, 2, 3, vec![0.5; 12]).unwrap()];
    assert_eq!(evaluate(&flat, &Constant(0.5)).unwrap(), f64::INFINITY);

    let model = ModelWeights::init(&small(5, 2, 1)).unwrap();
    let per_cube: Vec<f64> = cubes
        .iter()
        .map(|c| psnr(c, &model.forward_image(c).unwrap().1, 1.0).unwrap())
        .collect();
    let mean = per_cube.iter().sum::<f64>() / 3.0;
    assert_eq!(evaluate(&cubes, &model).unwrap(), mean);
    assert!(matches!(evaluate(&[], &model), Err(Error::Config(_))));
}

#[test]
fn psnr_examples() {
    assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_cube(&mut rng, 3, 4, 6);
        let b = random_cube(&mut rng, 3, 4, 6);
        let mut sum = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sum += (x - y) * (x - y);
        }
        let naive = 10.0 * (1.0 / (sum / 72.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - naive).abs() < 1e-9);
    }
}

#[test]
fn one_pixel_compress_matches_encoder() {
    let model = ModelWeights::init(&small(10, 3, 4)).unwrap();
    let cube = HsiCube::new(1, 1, 10, vec![0.1, 0.9, 0.3, 0.4, 0.5, 0.6, 0.2, 0.8, 0.7, 0.0]).unwrap();
    let img = compress(&cube, &model).unwrap();
    let z = model.encode_pixel(cube.data()).unwrap();
    assert_eq!(img.latents, z.iter().map(|&v| v as f32).collect::<Vec<_>>());
}

#[test]
fn payload_ratio_equals_compression_ratio() {
    let cfg = ModelConfig { embed_dim: 8, blocks: 1, heads: 2, hidden_dim: 16, block_mlp_dim: 8, ..ModelConfig::default() };
    let model = ModelWeights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cube = random_cube(&mut rng, 3, 5, 202);
    let img = compress(&cube, &model).unwrap();
    assert_eq!(img.latents.len() * 202, cube.data().len() * 7);
    let bytes = img.to_bytes().unwrap();
    assert_eq!(bytes.len() - CONTAINER_HEADER_BYTES, 3 * 5 * 7 * 4);
    let back = CompressedImage::from_bytes(&bytes).unwrap();
    assert!(back.latents.iter().zip(&img.latents).all(|(a, b)| a.to_bits() == b.to_bits()));
    let rec = decompress(&back, &model).unwrap();
    assert_eq!((rec.height(), rec.width(), rec.bands()), (3, 5, 202));
    assert_eq!((rec.raw_min(), rec.raw_max()), (cube.raw_min(), cube.raw_max()));
}

#[test]
fn compress_rejects_band_mismatch() {
    let model = ModelWeights::init(&small(10, 3, 4)).unwrap();
    let cube = HsiCube::new(1, 1, 9, vec![0.5; 9]).unwrap();
    assert!(matches!(compress(&cube, &model), Err(Error::Config(_))));
}

#[test]
fn rd_sweep_single_point_and_monotone_on_overfit_suite() {
    let cubes = synth_dataset(3, 4, 4, 16, 4, 0.0, 21).unwrap();
    let t = TrainConfig { epochs: 300, reduction: 1, lr: 3e-3, seed: 2, ..TrainConfig::default() };
    let data = SweepData { train: &cubes, val: &cubes, test: &cubes };
    let base = small(16, 1, 3);
    let one = rd_sweep(&data, &base, &[4], &t, SweepMode::Train { checkpoint_dir: None }, "x").unwrap();
    assert_eq!(one.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let pts = rd_sweep(&data, &base, &[2, 8, 4], &t, SweepMode::Train { checkpoint_dir: Some(dir.path()) }, "x").unwrap();
    let gammas: Vec<usize> = pts.iter().map(|p| p.gamma).collect();
    assert_eq!(gammas, vec![8, 4, 2]);
    for w in pts.windows(2) {
        assert!(w[0].psnr_db + 0.3 >= w[1].psnr_db, "{:?}", pts);
    }
    let loaded = rd_sweep(&data, &base, &[2, 8, 4], &t, SweepMode::LoadOnly { checkpoint_dir: dir.path() }, "x").unwrap();
    assert_eq!(loaded, pts);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_roundtrip(h in 1usize..5, w in 1usize..5, gamma in 1usize..6, fp: u64, lo in -1e3f64..0.0, span in 1e-3f64..1e3, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = CompressedImage {
            height: h,
            width: w,
            gamma,
            model_fingerprint: fp,
            raw_min: lo,
            raw_max: lo + span,
            latents: (0..h * w * gamma).map(|_| rng.random::<f32>()).collect(),
        };
        let bytes = img.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), CONTAINER_HEADER_BYTES + 4 * h * w * gamma);
        prop_assert_eq!(CompressedImage::from_bytes(&bytes).unwrap(), img);
        let cut = rng.random_range(0..bytes.len());
        prop_assert!(CompressedImage::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn psnr_symmetric_and_shift_detecting(seed: u64, c in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = HsiCube::new(2, 3, 4, (0..24).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap();
        let b = HsiCube::new(2, 3, 4, (0..24).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let shifted: Vec<f64> = a.data().iter().map(|v| v + c).collect();
        prop_assert!((mse(&shifted, a.data()).unwrap() - c * c).abs() < 1e-12);
    }
}

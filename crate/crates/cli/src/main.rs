use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hycot::codec::{compress, decompress, CompressedImage};
use hycot::config::RunConfig;
use hycot::dataio::{read_cube, split_dataset, synth_dataset_with_endmembers, write_cube, Manifest, SplitLabel, DEFAULT_FRACTIONS};
use hycot::metrics::{
    complexity_report, format_db, psnr, rd_sweep, render_complexity_table, render_rd_table, SweepData, SweepMode,
};
use hycot::training::{evaluate, train, BEST_FILE, LOG_FILE};
use hycot::{Error, ModelConfig, ModelWeights};

const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "hycot", version, about = "Pixelwise transformer compression for hyperspectral images")]
struct Cli {
    /// Worker threads for pixel-parallel work (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/val/test manifest.
    Synth(SynthArgs),
    /// Train one model on a dataset directory.
    Train(TrainArgs),
    /// Encode an HSC1 cube into an HYC1 latent file.
    Compress(CompressArgs),
    /// Decode an HYC1 latent file back into an HSC1 cube.
    Decompress(DecompressArgs),
    /// Mean PSNR of a checkpoint on one split.
    Eval(EvalArgs),
    /// Rate-distortion sweep over latent sizes.
    Rd(RdArgs),
    /// FLOPs and parameter counts over latent sizes.
    Complexity(ComplexityArgs),
}

/// Settings shared with the `key = value` config file. Flags override the file.
#[derive(Args, Default)]
struct Settings {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; all component seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of spectral bands C.
    #[arg(long)]
    bands: Option<usize>,
    /// Bands merged per token.
    #[arg(long)]
    group_depth: Option<usize>,
    /// Token embedding width.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Transformer blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width of the encoder and decoder MLPs.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Latent values per pixel.
    #[arg(long)]
    gamma: Option<usize>,
    /// Hidden width of the MLP inside each transformer block.
    #[arg(long)]
    block_mlp_dim: Option<usize>,
    /// Negative slope of LeakyReLU.
    #[arg(long)]
    leaky_slope: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Maximum pixels per optimisation step.
    #[arg(long)]
    batch_pixels: Option<usize>,
    /// Pixel reduction factor r (pixels per epoch = ceil(H*W / r)).
    #[arg(long)]
    r: Option<usize>,
    /// Write the last checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Settings {
    fn resolve(&self) -> hycot::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let pairs: [(&str, Option<String>); 15] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("bands", self.bands.map(|v| v.to_string())),
            ("group_depth", self.group_depth.map(|v| v.to_string())),
            ("embed_dim", self.embed_dim.map(|v| v.to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("hidden_dim", self.hidden_dim.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("block_mlp_dim", self.block_mlp_dim.map(|v| v.to_string())),
            ("leaky_slope", self.leaky_slope.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_pixels", self.batch_pixels.map(|v| v.to_string())),
            ("r", self.r.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    settings: Settings,
    /// Number of cubes.
    #[arg(long)]
    cubes: Option<usize>,
    /// Height and width of each cube.
    #[arg(long)]
    size: Option<usize>,
    /// Number of endmember spectra.
    #[arg(long)]
    endmembers: Option<usize>,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: Settings,
    /// Dataset directory containing manifest.txt.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input HSC1 cube.
    #[arg(long)]
    input: PathBuf,
    /// Output HYC1 file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    /// Model checkpoint; must be the one used for compression.
    #[arg(long)]
    model: PathBuf,
    /// Input HYC1 file.
    #[arg(long)]
    input: PathBuf,
    /// Output HSC1 cube.
    #[arg(long)]
    output: PathBuf,
    /// Original cube; when given, the PSNR of the reconstruction is printed.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory containing manifest.txt.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RdArgs {
    #[command(flatten)]
    settings: Settings,
    /// Dataset directory containing manifest.txt.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated latent sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    gammas: Vec<usize>,
    /// Directory of gamma_<G>.hycw checkpoints (default: <out-dir>/checkpoints).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Do not train; only evaluate existing checkpoints.
    #[arg(long)]
    load_only: bool,
    /// Label for the table rows.
    #[arg(long, default_value = "hycot")]
    label: String,
    /// Write the table to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    #[command(flatten)]
    settings: Settings,
    /// Comma-separated latent sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    gammas: Vec<usize>,
    /// Image height used for the FLOP count.
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Image width used for the FLOP count.
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Label for the table rows.
    #[arg(long, default_value = "hycot")]
    label: String,
    /// Write the table to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::ModelMismatch { .. } => 4,
        _ => 3,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn emit(text: &str, output: Option<&Path>) -> hycot::Result<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_split(data: &Path, label: SplitLabel) -> hycot::Result<Vec<hycot::HsiCube>> {
    Manifest::read(data.join(MANIFEST_FILE))?.load(data, label)
}

fn cmd_synth(a: SynthArgs) -> hycot::Result<()> {
    let mut c = a.settings.resolve()?;
    if let Some(v) = a.cubes {
        c.cubes = v;
    }
    if let Some(v) = a.size {
        c.height = v;
        c.width = v;
    }
    if let Some(v) = a.endmembers {
        c.endmembers = v;
    }
    if let Some(v) = a.noise_sd {
        c.noise_sd = v;
    }
    let params = c.synth_params()?;
    let set = synth_dataset_with_endmembers(&params)?;
    let split = split_dataset(set.cubes.len(), DEFAULT_FRACTIONS, c.split_seed())?;
    fs::create_dir_all(&c.out_dir).map_err(|e| io_err(&c.out_dir, e))?;
    let mut labels = vec![SplitLabel::Train; set.cubes.len()];
    for (label, idx) in split.parts() {
        for &i in idx {
            labels[i] = label;
        }
    }
    let mut manifest = Manifest::default();
    for (i, cube) in set.cubes.iter().enumerate() {
        let name = PathBuf::from(format!("cube_{i:03}.hsc"));
        write_cube(cube, c.out_dir.join(&name))?;
        manifest.entries.push((labels[i], name));
    }
    manifest.write(c.out_dir.join(MANIFEST_FILE))?;
    emit(&c.render(), Some(&c.out_dir.join(CONFIG_FILE)))?;
    println!(
        "wrote {} cubes ({} train, {} val, {} test) to {}",
        set.cubes.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        c.out_dir.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> hycot::Result<()> {
    let c = a.settings.resolve()?;
    let model = c.model_config()?;
    let tcfg = c.train_config()?;
    let tr = load_split(&a.data, SplitLabel::Train)?;
    let va = load_split(&a.data, SplitLabel::Val)?;
    fs::create_dir_all(&c.out_dir).map_err(|e| io_err(&c.out_dir, e))?;
    emit(&c.render(), Some(&c.out_dir.join(CONFIG_FILE)))?;
    let out = train(&tr, &va, ModelWeights::init(&model)?, &tcfg, Some(&c.out_dir))?;
    let final_psnr = out.log.last().map(|r| r.val_psnr_db).unwrap_or(out.best_val_psnr_db);
    println!("final validation PSNR {} dB", format_db(final_psnr));
    println!(
        "best validation PSNR {} dB at epoch {}; checkpoint {}; log {}",
        format_db(out.best_val_psnr_db),
        out.best_epoch,
        c.out_dir.join(BEST_FILE).display(),
        c.out_dir.join(LOG_FILE).display()
    );
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> hycot::Result<()> {
    let model = ModelWeights::load(&a.model)?;
    let cube = read_cube(&a.input)?;
    compress(&cube, &model)?.write(&a.output)?;
    println!("cr {}", model.config().cr());
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> hycot::Result<()> {
    let model = ModelWeights::load(&a.model)?;
    let image = CompressedImage::read(&a.input)?;
    let cube = decompress(&image, &model)?;
    let reference = a.reference.as_ref().map(read_cube).transpose()?;
    let quality = reference.as_ref().map(|r| psnr(r, &cube, 1.0)).transpose()?;
    write_cube(&cube, &a.output)?;
    println!("cr {}", model.config().cr());
    if let Some(db) = quality {
        println!("psnr {} dB", format_db(db));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> hycot::Result<()> {
    let label: SplitLabel = a.split.parse().map_err(|_| Error::Config(format!("unknown split {:?}", a.split)))?;
    let model = ModelWeights::load(&a.model)?;
    let cubes = load_split(&a.data, label)?;
    println!("{} psnr {} dB over {} cubes", label.as_str(), format_db(evaluate(&cubes, &model)?), cubes.len());
    Ok(())
}

fn cmd_rd(a: RdArgs) -> hycot::Result<()> {
    let mut c = a.settings.resolve()?;
    c.gamma = a.gammas.iter().copied().min().unwrap_or(1);
    let base = c.model_config()?;
    let tcfg = c.train_config()?;
    let dir = a.checkpoints.clone().unwrap_or_else(|| c.out_dir.join("checkpoints"));
    let test = load_split(&a.data, SplitLabel::Test)?;
    let (tr, va) = if a.load_only {
        (Vec::new(), Vec::new())
    } else {
        (load_split(&a.data, SplitLabel::Train)?, load_split(&a.data, SplitLabel::Val)?)
    };
    let mode = if a.load_only {
        SweepMode::LoadOnly { checkpoint_dir: &dir }
    } else {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        SweepMode::Train { checkpoint_dir: Some(&dir) }
    };
    let data = SweepData { train: &tr, val: &va, test: &test };
    let points = rd_sweep(&data, &base, &a.gammas, &tcfg, mode, &a.label)?;
    emit(&render_rd_table(&points), a.output.as_deref())
}

fn cmd_complexity(a: ComplexityArgs) -> hycot::Result<()> {
    let mut c = a.settings.resolve()?;
    c.gamma = a.gammas.iter().copied().min().unwrap_or(1);
    let base = c.model_config()?;
    let configs: Vec<(String, ModelConfig)> = a
        .gammas
        .iter()
        .map(|&g| (a.label.clone(), ModelConfig { gamma: g, ..base.clone() }))
        .collect();
    let rows = complexity_report(&configs, a.height, a.width)?;
    emit(&render_complexity_table(&rows), a.output.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rd(a) => cmd_rd(a),
        Command::Complexity(a) => cmd_complexity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

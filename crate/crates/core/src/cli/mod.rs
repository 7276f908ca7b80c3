//! Command-line front end: data generation, training, evaluation,
//! sampling, gradient checks and grid search.

pub mod grid;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{gen_pinwheel, gen_surrogate_attribution, load_csv, save_csv, DataError, Dataset, PinwheelConfig, SurrogateConfig};
use crate::distributions::sample_standard_normal;
use crate::elbo::{gradient_check, CrossEntropyWeights, ElboError, GroupCheck, LossOptions, TrainingMode, TvaeModel};
use crate::mixture::{materialize_params, nu_to_preactivation, sample_generative, MixtureError, PosteriorStats, SmmRawParams};
use crate::network::{decoder_forward, encoder_forward, Activation, MlpConfig, NetworkError};
use crate::tensor::Tensor;
use crate::training::{child_seed, evaluate, metrics_csv, timings_csv, train, Checkpoint, TrainConfig, TrainError};

pub use grid::{expand_grid, GridCell, GridRow};

/// Overrides the directory that holds run directories.
pub const OUTPUT_ROOT_ENV: &str = "TVAE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Largest `rows × obs_dim` the gradient check accepts.
pub const GRADCHECK_MAX_CELLS: usize = 10_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Elbo(#[from] ElboError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for invalid input or a failed check, 2 for numerical faults.
    pub fn exit_code(&self) -> i32 {
        let numeric = match self {
            CliError::Train(e) => e.is_numeric(),
            CliError::Elbo(e) => TrainError::Elbo(e.clone()).is_numeric(),
            CliError::Mixture(e) => TrainError::Mixture(e.clone()).is_numeric(),
            _ => false,
        };
        if numeric {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tvae", version, about = "Variational autoencoder with a Student-t mixture latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the spiral-arm clustering benchmark as CSV.
    Pinwheel(PinwheelArgs),
    /// Write the heavy-tailed labeled benchmark as CSV.
    Surrogate(SurrogateArgs),
    /// Train a model into a fresh run directory.
    Train(TrainArgs),
    /// Error rate and confusion matrix of a checkpoint on labeled data.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train every combination of a parameter grid and rank by dev error.
    Gridsearch(GridArgs),
    /// Draw observations from a trained generative model.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct PinwheelArgs {
    #[arg(long, default_value_t = 5)]
    pub arms: usize,
    #[arg(long, default_value_t = 400)]
    pub points_per_arm: usize,
    #[arg(long, default_value_t = 0.3)]
    pub radial_std: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tangential_std: f64,
    #[arg(long, default_value_t = 0.25)]
    pub rate: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SurrogateArgs {
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub obs_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 503)]
    pub per_class_min: usize,
    #[arg(long, default_value_t = 1000)]
    pub per_class_max: usize,
    #[arg(long, default_value_t = 3.0)]
    pub nu_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub nu_max: f64,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nonlinearity: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Unsupervised,
    Supervised,
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Gaussian mixture prior: degrees of freedom frozen at 10^6.
    Gaussian,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with `TrainConfig` keys; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Leading supervised epochs in semi-supervised mode.
    #[arg(long)]
    pub supervised_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Rows of generated samples written for plotting.
    #[arg(long, default_value_t = 1000)]
    pub plot_samples: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Matching {
    /// Match clusters to classes only for unsupervised checkpoints.
    Auto,
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Matching::Auto)]
    pub matching: Matching,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub obs_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 6)]
    pub rows: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML of `TrainConfig` keys shared by every cell.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// TOML mapping config keys to arrays of candidate values.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Share of training rows that keep their labels.
    #[arg(long, default_value_t = 1.0)]
    pub label_fraction: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Content hash of the resolved config.
    pub config_hash: String,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(Self::FILE))?)?)
    }
}

/// Git-style object hash (`"blob <len>\0"` prefix), hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Pinwheel(a) => cmd_pinwheel(a),
        Command::Surrogate(a) => cmd_surrogate(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|_| ()),
        Command::Gridsearch(a) => grid::cmd_gridsearch(a).map(|_| ()),
        Command::Sample(a) => cmd_sample(a),
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn cmd_pinwheel(a: &PinwheelArgs) -> Result<(), CliError> {
    let cfg = PinwheelConfig {
        arms: a.arms,
        points_per_arm: a.points_per_arm,
        radial_std: a.radial_std,
        tangential_std: a.tangential_std,
        rate: a.rate,
    };
    let ds = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(a.seed), &cfg)?;
    create_parent(&a.out)?;
    save_csv(&ds, &a.out)?;
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

pub fn cmd_surrogate(a: &SurrogateArgs) -> Result<(), CliError> {
    let cfg = SurrogateConfig {
        classes: a.classes,
        obs_dim: a.obs_dim,
        latent_dim: a.latent_dim,
        per_class_min: a.per_class_min,
        per_class_max: a.per_class_max,
        nu_min: a.nu_min,
        nu_max: a.nu_max,
        separation: a.separation,
        nonlinearity: a.nonlinearity,
        noise_std: a.noise_std,
    };
    let ds = gen_surrogate_attribution(&mut ChaCha8Rng::seed_from_u64(a.seed), &cfg)?;
    create_parent(&a.out)?;
    save_csv(&ds, &a.out)?;
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

/// Config file, then command-line overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    match (a.mode, a.supervised_epochs) {
        (Some(ModeArg::Unsupervised), _) => cfg.mode = TrainingMode::Unsupervised,
        (Some(ModeArg::Supervised), _) => cfg.mode = TrainingMode::Supervised,
        (Some(ModeArg::SemiSupervised), Some(n)) => cfg.mode = TrainingMode::SemiSupervised { supervised_epochs: n },
        (Some(ModeArg::SemiSupervised), None) => {
            return Err(CliError::Usage("--mode semi-supervised needs --supervised-epochs".into()))
        }
        (None, Some(n)) => match cfg.mode {
            TrainingMode::SemiSupervised { .. } => cfg.mode = TrainingMode::SemiSupervised { supervised_epochs: n },
            _ => return Err(CliError::Usage("--supervised-epochs only applies to semi-supervised mode".into())),
        },
        (None, None) => {}
    }
    if a.baseline == Some(Baseline::Gaussian) {
        cfg = cfg.gaussian_baseline();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and fills a run directory; returns its path.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let ds = load_csv(&a.data)?;
    let cfg = resolve_train_config(a)?;
    let text = cfg.to_toml_string();
    let hash = content_hash(text.as_bytes());
    let dir = a.out_dir.clone().unwrap_or_else(|| output_root().join(format!("train-{}", &hash[..12])));
    fs::create_dir_all(&dir)?;
    let outputs = ["config.toml", "checkpoint.json", "metrics.csv", "timings.csv", "latents.csv", "samples.csv"];
    RunManifest {
        command: "train".into(),
        config_path: a.config.clone(),
        seed: a.seed,
        inputs: vec![a.data.clone()],
        outputs: outputs.iter().map(PathBuf::from).collect(),
        config_hash: hash,
    }
    .save(&dir)?;
    fs::write(dir.join("config.toml"), &text)?;

    let outcome = train(&ds, cfg)?;
    outcome.checkpoint.save(dir.join("checkpoint.json"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    fs::write(dir.join("timings.csv"), timings_csv(&outcome.metrics))?;
    let model = outcome.checkpoint.model()?;
    write_latents(&model, &ds, BufWriter::new(File::create(dir.join("latents.csv"))?))?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(a.seed, 1));
    write_samples(&model, a.plot_samples, &mut rng, BufWriter::new(File::create(dir.join("samples.csv"))?))?;

    match outcome.metrics.last() {
        Some(m) => println!(
            "epoch {} loss {:.6} error {} mean nu {:.3}",
            m.epoch,
            m.loss,
            m.error_rate.map_or("n/a".to_string(), |e| format!("{e:.4}")),
            m.mean_nu
        ),
        None => println!("no epochs run"),
    }
    println!("run directory {}", dir.display());
    Ok(dir)
}

/// One row per observation: label, assigned component, latent mean and
/// responsibilities.
pub fn write_latents<W: Write>(model: &TvaeModel, ds: &Dataset, mut w: W) -> Result<(), CliError> {
    let enc = encoder_forward(&ds.observations, &model.encoder)?;
    let params = materialize_params(&model.mixture)?;
    let post = PosteriorStats::compute(&enc, &params)?;
    let (d, k) = (model.latent_dim(), model.components());
    let mut header = vec!["label".to_string(), "cluster".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..k).map(|j| format!("gamma{j}")));
    writeln!(w, "{}", header.join(","))?;
    let clusters = post.hard_assignments();
    for i in 0..ds.len() {
        let label = ds.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        let mut row = vec![label, clusters[i].to_string()];
        row.extend(enc.mu_x.row_slice(i).iter().map(|v| v.to_string()));
        row.extend(post.gamma.row_slice(i).iter().map(|v| v.to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `cluster,u,x0..,o0..` rows drawn from the full generative model.
pub fn write_samples<W: Write, R: Rng + ?Sized>(model: &TvaeModel, count: usize, rng: &mut R, mut w: W) -> Result<(), CliError> {
    let (d, l) = (model.latent_dim(), model.encoder.config.input_dim());
    let mut header = vec!["cluster".to_string(), "u".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..l).map(|j| format!("o{j}")));
    writeln!(w, "{}", header.join(","))?;
    if count > 0 {
        let params = materialize_params(&model.mixture)?;
        let s = sample_generative(rng, &params, count)?;
        let dec = decoder_forward(&s.latents, &model.decoder)?;
        let noise = sample_standard_normal(rng, &[count, l]);
        for i in 0..count {
            let mut row = vec![s.labels[i].to_string(), s.scales[i].to_string()];
            row.extend(s.latents.row_slice(i).iter().map(|v| v.to_string()));
            for j in 0..l {
                let o = dec.mu_o.get(i, j) + dec.log_std_o.get(i, j).exp() * noise.get(i, j);
                row.push(o.to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub matched: bool,
    /// `confusion[cluster][class]`
    pub confusion: Vec<Vec<usize>>,
    pub permutation: Vec<usize>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = load_csv(&a.data)?;
    let matched = match a.matching {
        Matching::On => true,
        Matching::Off => false,
        Matching::Auto => ck.config.mode == TrainingMode::Unsupervised,
    };
    let ev = evaluate(&ck.model()?, &ds, matched)?;
    let k = ev.permutation.len();
    let report = EvalReport {
        error_rate: ev.error_rate,
        matched,
        confusion: (0..k).map(|c| ev.confusion.row_slice(c).iter().map(|v| *v as usize).collect()).collect(),
        permutation: ev.permutation,
    };
    println!("error rate {:.6} ({} rows, matched: {})", report.error_rate, ds.len(), matched);
    println!("confusion (rows: clusters, columns: classes)");
    for row in &report.confusion {
        println!("  {}", row.iter().map(|v| format!("{v:>6}")).collect::<String>());
    }
    if let Some(p) = &a.out {
        create_parent(p)?;
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Random tiny model and data for [`cmd_gradcheck`].
pub fn gradcheck_instance(a: &GradcheckArgs) -> Result<(TvaeModel, Tensor, Tensor), CliError> {
    let (l, d, k, n) = (a.obs_dim, a.latent_dim, a.components, a.rows);
    if l == 0 || d == 0 || k == 0 || n == 0 || a.hidden.contains(&0) {
        return Err(CliError::Usage("gradcheck dimensions must be positive".into()));
    }
    if n * l > GRADCHECK_MAX_CELLS {
        return Err(CliError::Usage(format!("rows × obs_dim = {} exceeds {GRADCHECK_MAX_CELLS}", n * l)));
    }
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mu = Tensor::matrix(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut mixture = SmmRawParams::isotropic(mu, 5.0, 0.1);
    mixture.m = Tensor::row((0..k).map(|_| rng.gen_range(-0.5..0.5)).collect());
    mixture.n = Tensor::row((0..k).map(|_| nu_to_preactivation(rng.gen_range(3.0..8.0))).collect());
    let strict = d * (d - 1) / 2;
    mixture.c_strict = Tensor::matrix(k, strict, (0..k * strict).map(|_| rng.gen_range(-0.3..0.3)).collect());
    mixture.c_logdiag = Tensor::matrix(k, d, (0..k * d).map(|_| rng.gen_range(-0.3..0.3)).collect());
    let mut dims = vec![l];
    dims.extend(&a.hidden);
    dims.push(d);
    let enc = MlpConfig::new(dims, Activation::Tanh);
    let dec = enc.reversed();
    let model = TvaeModel::init(enc, dec, mixture, &mut rng)?;
    let o = sample_standard_normal(&mut rng, &[n, l]);
    let eps = sample_standard_normal(&mut rng, &[n, d]);
    Ok((model, o, eps))
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<GroupCheck>, CliError> {
    let (model, o, eps) = gradcheck_instance(a)?;
    let opts = LossOptions { l1_coeff: 0.0, ..Default::default() };
    let report = gradient_check(&model, &o, &eps, CrossEntropyWeights::Responsibilities, &opts, a.step, a.corrupt)?;
    println!("{:<8} {:>8} {:>14} {:>14}", "group", "entries", "max rel err", "max abs err");
    for g in &report {
        println!("{:<8} {:>8} {:>14.3e} {:>14.3e}", g.group, g.entries, g.max_rel_err, g.max_abs_err);
    }
    if let Some(p) = &a.out {
        create_parent(p)?;
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    let failed: Vec<&str> = report.iter().filter(|g| !(g.max_rel_err <= GRADCHECK_TOLERANCE)).map(|g| g.group).collect();
    if failed.is_empty() {
        println!("ok: every group within {GRADCHECK_TOLERANCE:e}");
        Ok(report)
    } else {
        Err(CliError::GradcheckFailed(format!("groups {} exceed {GRADCHECK_TOLERANCE:e}", failed.join(", "))))
    }
}

pub fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    create_parent(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    write_samples(&model, a.count, &mut rng, BufWriter::new(File::create(&a.out)?))?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

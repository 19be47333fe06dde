//! The `fmr` command line: dataset generation, training, one-shot
//! registration and benchmark sweeps.
//!
//! Settings come from flags, then an optional TOML config file, then built-in
//! defaults. Exit codes: 0 success, 2 usage, parse or I/O error, 3 training
//! failure, 4 solver failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bench::{
    bench_csv, density_test, noise_test, overlap_test, rotation_sweep, timing_csv, timing_report, BenchProtocol,
    DEFAULT_CROP_FRACTIONS, DEFAULT_KEEP_FRACTION, DEFAULT_NOISE_SIGMAS,
};
use crate::cloud::{self, normalize_unit_box, CloudFormat, Normalization, PointCloud, ShapeFamily};
use crate::losses::TrainMode;
use crate::model::{ModelConfig, ModelParams};
use crate::registration::{
    icp_register, register, FmrRegistrar, IcpConfig, IcpRegistrar, RegistrationConfig, RegistrationError,
    RegistrationResult, Registrar,
};
use crate::se3::RigidTransform;
use crate::tinynet::{load_checkpoint, save_checkpoint};
use crate::training::{train_with_progress, Dataset, DatasetSpec, TrainConfig, TrainError};
use crate::util::{atomic_write, format_sig};

pub const CONFIG_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fmr", version, about = "Correspondence-free feature-metric point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of unit-box normalized shapes.
    Gen(GenArgs),
    /// Train the encoder/decoder on a dataset directory.
    Train(TrainArgs),
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Run a benchmark protocol and write its CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Comma-separated shape families (sphere, box, torus, ellipsoid, composite).
    #[arg(long, value_delimiter = ',', required = true)]
    families: Vec<ShapeFamily>,
    /// Clouds per family.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `fmr gen`.
    data: PathBuf,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode: semi or unsupervised [default: unsupervised]
    #[arg(long)]
    mode: Option<TrainMode>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Global feature size K [default: 1024]
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Points per training cloud [default: 512]
    #[arg(long)]
    cloud_size: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Steps averaged per optimizer update [default: 1]
    #[arg(long)]
    grad_accumulation: Option<usize>,
    /// Largest noise standard deviation added to training sources [default: 0]
    #[arg(long)]
    augment_noise_max: Option<f64>,
    /// Smallest fraction of points kept in training sources [default: 1]
    #[arg(long)]
    augment_keep_min: Option<f64>,
    /// Output directory for checkpoints and the report [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Fmr,
    Icp,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    /// Cloud to move (xyz, ply or off).
    #[arg(long)]
    source: PathBuf,
    /// Cloud to align to.
    #[arg(long)]
    target: PathBuf,
    /// Checkpoint; required for fmr.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Fmr)]
    method: Method,
    /// Maximum solver iterations [default: 10]
    #[arg(long)]
    iters: Option<usize>,
    /// Finite-difference step of the feature Jacobian [default: 0.02]
    #[arg(long)]
    xi: Option<f64>,
    /// Damping added to the normal equations [default: 0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Write the aligned source here, in the target's original frame.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Rotation,
    Density,
    Noise,
    Overlap,
    Timing,
}

impl Protocol {
    fn file_name(self) -> &'static str {
        match self {
            Protocol::Rotation => "rotation.csv",
            Protocol::Density => "density.csv",
            Protocol::Noise => "noise.csv",
            Protocol::Overlap => "overlap.csv",
            Protocol::Timing => "timing.csv",
        }
    }
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(value_enum)]
    protocol: Protocol,
    /// Checkpoint used by the fmr method.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Checkpoint of an unsupervised model, benchmarked as fmr_unsup.
    #[arg(long)]
    model_unsup: Option<PathBuf>,
    /// Dataset directory; not needed for timing.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Methods to compare: fmr, fmr_unsup, icp [default: every method with a model, plus icp]
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Initial rotation angles in degrees [default: 0,10,...,80]
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    /// Maximum initial translation [default: 0.8]
    #[arg(long)]
    trans_max: Option<f64>,
    /// Trials per cell [default: 20]
    #[arg(long)]
    trials: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Success threshold on rotation error in degrees [default: 5]
    #[arg(long)]
    success_rot_deg: Option<f64>,
    /// Success threshold on translation error [default: 0.05]
    #[arg(long)]
    success_trans: Option<f64>,
    /// Source keep fractions for density [default: 0.1]
    #[arg(long, value_delimiter = ',')]
    keep: Option<Vec<f64>>,
    /// Noise standard deviations for noise [default: 0.01,0.02]
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Cropped fractions for overlap [default: 0.1,0.25]
    #[arg(long, value_delimiter = ',')]
    crops: Option<Vec<f64>>,
    /// Cloud sizes for timing [default: 512,2048,8192]
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Maximum solver iterations [default: 10]
    #[arg(long)]
    iters: Option<usize>,
    /// Finite-difference step of the feature Jacobian [default: 0.02]
    #[arg(long)]
    xi: Option<f64>,
    /// Output directory; the CSV is named after the protocol.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    config_version: u32,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    registration: RegistrationSection,
    #[serde(default)]
    bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    mode: Option<String>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    feature_dim: Option<usize>,
    cloud_size: Option<usize>,
    val_fraction: Option<f64>,
    grad_accumulation: Option<usize>,
    rot_max_train_deg: Option<f64>,
    trans_max_train: Option<f64>,
    train_reg_iterations: Option<usize>,
    augment_noise_max: Option<f64>,
    augment_keep_min: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistrationSection {
    max_iterations: Option<usize>,
    xi: Option<f64>,
    step_tolerance: Option<f64>,
    damping_lambda: Option<f64>,
    recompute_jacobian: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchSection {
    methods: Option<Vec<String>>,
    angles: Option<Vec<f64>>,
    trans_max: Option<f64>,
    trials: Option<usize>,
    seed: Option<u64>,
    success_rot_deg: Option<f64>,
    success_trans: Option<f64>,
    keep: Option<Vec<f64>>,
    sigmas: Option<Vec<f64>>,
    crops: Option<Vec<f64>>,
    sizes: Option<Vec<usize>>,
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile {
            config_version: CONFIG_VERSION,
            ..ConfigFile::default()
        });
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if file.config_version != CONFIG_VERSION {
        return Err(usage(format!(
            "{}: config_version {} is not supported (expected {CONFIG_VERSION})",
            path.display(),
            file.config_version
        )));
    }
    Ok(file)
}

fn registration_config(
    section: &RegistrationSection,
    iters: Option<usize>,
    xi: Option<f64>,
    lambda: Option<f64>,
) -> Result<RegistrationConfig, Failure> {
    let d = RegistrationConfig::default();
    let cfg = RegistrationConfig {
        max_iterations: iters.or(section.max_iterations).unwrap_or(d.max_iterations),
        perturbation_xi: xi.or(section.xi).unwrap_or(d.perturbation_xi),
        step_tolerance: section.step_tolerance.unwrap_or(d.step_tolerance),
        damping_lambda: lambda.or(section.damping_lambda).unwrap_or(d.damping_lambda),
        recompute_jacobian: section.recompute_jacobian.unwrap_or(d.recompute_jacobian),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<ModelParams, Failure> {
    let ckpt = load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    ModelParams::from_checkpoint(&ckpt).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cloud_format(path: &Path) -> Result<CloudFormat, Failure> {
    CloudFormat::from_path(path)
        .ok_or_else(|| usage(format!("{}: unknown cloud format (expected .xyz, .ply or .off)", path.display())))
}

fn load_cloud(path: &Path) -> Result<PointCloud, Failure> {
    let format = cloud_format(path)?;
    cloud::load(path, format).map_err(|e| usage(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    atomic_write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if args.points == 0 || args.count == 0 {
        return Err(usage("--points and --count must be positive"));
    }
    let dataset = Dataset::synthesize(&DatasetSpec {
        families: args.families.clone(),
        per_family: args.count,
        points: args.points,
        seed: args.seed,
    })
    .map_err(|e| usage(e.to_string()))?;
    dataset.write_dir(&args.out).map_err(|e| usage(e.to_string()))?;
    let _ = writeln!(out, "wrote {} clouds to {}", dataset.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let file = read_config(args.config.as_deref())?;
    let t = &file.train;
    if !args.data.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", args.data.display())));
    }
    let d = TrainConfig::default();
    let mode = match (args.mode, &t.mode) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse().map_err(usage)?,
        (None, None) => d.mode,
    };
    let cfg = TrainConfig {
        mode,
        epochs: args.epochs.or(t.epochs).unwrap_or(d.epochs),
        lr: args.lr.or(t.lr).unwrap_or(d.lr),
        cloud_size: args.cloud_size.or(t.cloud_size).unwrap_or(d.cloud_size),
        rot_max_train: t.rot_max_train_deg.map(f64::to_radians).unwrap_or(d.rot_max_train),
        trans_max_train: t.trans_max_train.unwrap_or(d.trans_max_train),
        seed: args.seed.or(t.seed).unwrap_or(d.seed),
        val_fraction: args.val_fraction.or(t.val_fraction).unwrap_or(d.val_fraction),
        grad_accumulation: args.grad_accumulation.or(t.grad_accumulation).unwrap_or(d.grad_accumulation),
        model: ModelConfig::default().with_feature_dim(args.feature_dim.or(t.feature_dim).unwrap_or(1024)),
        registration: registration_config(&file.registration, None, None, None)?,
        train_reg_iterations: t.train_reg_iterations.unwrap_or(d.train_reg_iterations),
        augment_noise_max: args.augment_noise_max.or(t.augment_noise_max).unwrap_or(d.augment_noise_max),
        augment_keep_min: args.augment_keep_min.or(t.augment_keep_min).unwrap_or(d.augment_keep_min),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dataset = Dataset::read_dir(&args.data).map_err(|e| usage(e.to_string()))?;
    let outcome = train_with_progress(&cfg, &dataset, |row| {
        let _ = writeln!(
            out,
            "epoch {} loss={} val_chamfer={}",
            row.epoch,
            format_sig(row.loss_total, 6),
            format_sig(row.val_chamfer, 6)
        );
    })
    .map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => Failure {
            code: EXIT_TRAINING,
            message: e.to_string(),
        },
        other => usage(other.to_string()),
    })?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    create_dir(&dir)?;
    let save = |params: &ModelParams, name: &str| {
        let path = dir.join(name);
        save_checkpoint(&params.to_checkpoint(), &path).map_err(|e| usage(format!("{}: {e}", path.display())))
    };
    save(&outcome.best, "best.ckpt")?;
    save(&outcome.last, "final.ckpt")?;
    write_file(&dir.join("train_report.csv"), outcome.report.to_csv().as_bytes())?;
    let _ = writeln!(out, "best epoch {}; wrote {}", outcome.report.best_epoch, dir.display());
    Ok(())
}

/// `R x + t` in original coordinates from a motion between normalized clouds.
fn denormalize(g: &RigidTransform, source: &Normalization, target: &Normalization) -> RigidTransform {
    let r = *g.rotation();
    let t = g.translation() * target.extent + target.offset - r * source.offset;
    RigidTransform::from_parts_unchecked(r, t)
}

fn cmd_register(args: &RegisterArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let file = read_config(args.config.as_deref())?;
    let cfg = registration_config(&file.registration, args.iters, args.xi, args.lambda)?;
    let params = match (args.method, &args.model) {
        (Method::Fmr, None) => return Err(usage("--method fmr needs --model")),
        (Method::Fmr, Some(path)) => Some(load_model(path)?),
        (Method::Icp, _) => None,
    };
    let source = load_cloud(&args.source)?;
    let target = load_cloud(&args.target)?;
    let (p, target_norm) = normalize_unit_box(&target).map_err(|e| usage(format!("{}: {e}", args.target.display())))?;
    let (_, own) = normalize_unit_box(&source).map_err(|e| usage(format!("{}: {e}", args.source.display())))?;
    // both clouds share the target's scale so the motion stays rigid
    let source_norm = Normalization {
        offset: own.offset,
        extent: target_norm.extent,
    };
    let q = source_norm.apply(&source);
    let result: Result<RegistrationResult, RegistrationError> = match &params {
        Some(params) => register(&p, &q, params, &cfg),
        None => icp_register(
            &p,
            &q,
            &IcpConfig {
                max_iterations: args.iters.unwrap_or(IcpConfig::default().max_iterations),
                ..IcpConfig::default()
            },
        ),
    };
    let result = result.map_err(|e| Failure {
        code: match e {
            RegistrationError::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_SOLVER,
        },
        message: e.to_string(),
    })?;
    let g = denormalize(&result.g_est, &source_norm, &target_norm);
    if let Some(path) = &args.out {
        let format = cloud_format(path)?;
        cloud::save(&g.apply(&source), path, format).map_err(|e| usage(e.to_string()))?;
    }
    for row in g.to_matrix3x4() {
        let cells: Vec<String> = row.iter().map(|v| format_sig(*v, 9)).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    let _ = writeln!(out, "r_est={}", format_sig(result.r_est, 9));
    let _ = writeln!(out, "iterations={}", result.iterations_run);
    Ok(())
}

fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let file = read_config(args.config.as_deref())?;
    let b = &file.bench;
    let reg = registration_config(&file.registration, args.iters, args.xi, None)?;
    let d = BenchProtocol::default();
    let protocol = BenchProtocol {
        init_rot_angles_deg: args.angles.clone().or(b.angles.clone()).unwrap_or(d.init_rot_angles_deg),
        init_trans_max: args.trans_max.or(b.trans_max).unwrap_or(d.init_trans_max),
        trials_per_cell: args.trials.or(b.trials).unwrap_or(d.trials_per_cell),
        perturbation: d.perturbation,
        seed: args.seed.or(b.seed).unwrap_or(d.seed),
        success_rot_deg: args.success_rot_deg.or(b.success_rot_deg).unwrap_or(d.success_rot_deg),
        success_trans: args.success_trans.or(b.success_trans).unwrap_or(d.success_trans),
    };
    protocol.validate().map_err(usage)?;

    let supervised = args.model.as_deref().map(load_model).transpose()?;
    let unsupervised = args.model_unsup.as_deref().map(load_model).transpose()?;
    let methods = match args.methods.clone().or(b.methods.clone()) {
        Some(m) => m,
        None => {
            let mut m = Vec::new();
            if supervised.is_some() {
                m.push("fmr".to_string());
            }
            if unsupervised.is_some() {
                m.push("fmr_unsup".to_string());
            }
            m.push("icp".to_string());
            m
        }
    };
    let mut fmr = Vec::new();
    for name in &methods {
        let params = match name.as_str() {
            "fmr" => supervised.as_ref().ok_or_else(|| usage("method fmr needs --model"))?,
            "fmr_unsup" => unsupervised.as_ref().ok_or_else(|| usage("method fmr_unsup needs --model-unsup"))?,
            "icp" => continue,
            other => return Err(usage(format!("unknown method '{other}' (expected fmr, fmr_unsup or icp)"))),
        };
        fmr.push(FmrRegistrar {
            name: name.clone(),
            params,
            config: reg,
        });
    }
    let icp = IcpRegistrar {
        config: IcpConfig::default(),
    };
    let mut registrars: Vec<&dyn Registrar> = Vec::new();
    let mut fmr_iter = fmr.iter();
    for name in &methods {
        if name == "icp" {
            registrars.push(&icp);
        } else {
            registrars.push(fmr_iter.next().expect("one registrar per fmr method"));
        }
    }

    let csv = if args.protocol == Protocol::Timing {
        let sizes = args.sizes.clone().or(b.sizes.clone()).unwrap_or_else(|| vec![512, 2048, 8192]);
        if sizes.iter().any(|&n| n < 2) {
            return Err(usage("timing sizes must be at least 2"));
        }
        timing_csv(&timing_report(&registrars, &sizes, protocol.trials_per_cell.max(10), protocol.seed))
    } else {
        let data = args.data.as_ref().ok_or_else(|| usage("--data is required"))?;
        if !data.is_dir() {
            return Err(usage(format!("dataset directory {} does not exist", data.display())));
        }
        let dataset = Dataset::read_dir(data).map_err(|e| usage(e.to_string()))?;
        let levels = |flag: &Option<Vec<f64>>, file: &Option<Vec<f64>>, default: &[f64]| {
            flag.clone().or(file.clone()).unwrap_or_else(|| default.to_vec())
        };
        let check = |values: &[f64], ok: fn(f64) -> bool, what: &str| {
            if values.is_empty() || !values.iter().all(|&v| ok(v)) {
                Err(usage(format!("invalid {what} levels {values:?}")))
            } else {
                Ok(())
            }
        };
        let rows = match args.protocol {
            Protocol::Rotation => rotation_sweep(&registrars, &dataset, &protocol),
            Protocol::Density => {
                let keep = levels(&args.keep, &b.keep, &[DEFAULT_KEEP_FRACTION]);
                check(&keep, |v| v > 0.0 && v <= 1.0, "keep")?;
                density_test(&registrars, &dataset, &protocol, &keep)
            }
            Protocol::Noise => {
                let sigmas = levels(&args.sigmas, &b.sigmas, &DEFAULT_NOISE_SIGMAS);
                check(&sigmas, |v| v >= 0.0 && v.is_finite(), "noise")?;
                noise_test(&registrars, &dataset, &protocol, &sigmas)
            }
            Protocol::Overlap => {
                let crops = levels(&args.crops, &b.crops, &DEFAULT_CROP_FRACTIONS);
                check(&crops, |v| (0.0..1.0).contains(&v), "crop")?;
                overlap_test(&registrars, &dataset, &protocol, &crops)
            }
            Protocol::Timing => unreachable!("handled above"),
        };
        bench_csv(&rows)
    };
    create_dir(&args.out)?;
    let path = args.out.join(args.protocol.file_name());
    write_file(&path, csv.as_bytes())?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}

/// Sizes the global thread pool from `FMR_THREADS`; later calls are no-ops.
fn configure_threads() {
    if let Some(n) = std::env::var("FMR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Register(a) => cmd_register(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

//! Trains a small model on synthetic shapes and benchmarks it against ICP.
//!
//! Environment overrides: EPOCHS, LR, K, PER_FAMILY, MODE (semi|unsupervised), ACCUM,
//! AUG_NOISE, AUG_KEEP.

use fmr::bench::{bench_csv, density_test, noise_test, rotation_sweep, BenchProtocol};
use fmr::cloud::ShapeFamily;
use fmr::model::ModelConfig;
use fmr::registration::{FmrRegistrar, IcpConfig, IcpRegistrar, Registrar, RegistrationConfig};
use fmr::training::{train_with_progress, training_split, Dataset, DatasetSpec, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = Dataset::synthesize(&DatasetSpec {
        families: vec![ShapeFamily::Box, ShapeFamily::Ellipsoid, ShapeFamily::Composite],
        per_family: env("PER_FAMILY", 64),
        points: 512,
        seed: 7,
    })?;
    let cfg = TrainConfig {
        mode: env("MODE", "unsupervised".to_string()).parse()?,
        epochs: env("EPOCHS", 50),
        lr: env("LR", 1e-3),
        grad_accumulation: env("ACCUM", 1),
        seed: 1,
        augment_noise_max: env("AUG_NOISE", 0.0),
        augment_keep_min: env("AUG_KEEP", 1.0),
        model: ModelConfig::default().with_feature_dim(env("K", 256)),
        ..TrainConfig::default()
    };
    let out = train_with_progress(&cfg, &dataset, |row| {
        println!(
            "epoch {:3}  loss {:.5}  cf {:.5}  pe {:.5}  val_cf {:.5}  val_rot {:?}  {:.1}s",
            row.epoch, row.loss_total, row.loss_cf, row.loss_pe, row.val_chamfer, row.val_rot_err_deg, row.seconds
        )
    })?;
    let held_out = dataset.subset(&training_split(&cfg, &dataset).val);
    let fmr = FmrRegistrar {
        name: "fmr".into(),
        params: &out.best,
        config: RegistrationConfig::default(),
    };
    let icp = IcpRegistrar { config: IcpConfig::default() };
    let methods: [&dyn Registrar; 2] = [&fmr, &icp];
    let protocol = BenchProtocol {
        init_rot_angles_deg: (0..=6).map(|i| 10.0 * i as f64).collect(),
        trials_per_cell: 30,
        seed: 3,
        ..BenchProtocol::default()
    };
    print!("{}", bench_csv(&rotation_sweep(&methods, &held_out, &protocol)));
    let at = |angle: f64| BenchProtocol {
        init_rot_angles_deg: vec![angle],
        trials_per_cell: 50,
        seed: 909,
        ..BenchProtocol::default()
    };
    print!("{}", bench_csv(&density_test(&methods, &held_out, &at(60.0), &[0.1])));
    print!("{}", bench_csv(&noise_test(&methods, &held_out, &at(30.0), &[0.02])));
    Ok(())
}

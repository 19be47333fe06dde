//! Runs every benchmark protocol on a small dataset with a briefly trained
//! model and ICP, printing the CSV tables.

use fmr::bench::{
    bench_csv, density_test, noise_test, overlap_test, rotation_sweep, timing_csv, timing_report, BenchProtocol,
    DEFAULT_CROP_FRACTIONS, DEFAULT_KEEP_FRACTION, DEFAULT_NOISE_SIGMAS,
};
use fmr::cloud::ShapeFamily;
use fmr::losses::TrainMode;
use fmr::model::ModelConfig;
use fmr::registration::{FmrRegistrar, IcpConfig, IcpRegistrar, Registrar, RegistrationConfig};
use fmr::training::{train, training_split, Dataset, DatasetSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = Dataset::synthesize(&DatasetSpec {
        families: vec![ShapeFamily::Box, ShapeFamily::Ellipsoid, ShapeFamily::Composite],
        per_family: 20,
        points: 256,
        seed: 2,
    })?;
    let cfg = TrainConfig {
        mode: TrainMode::Semi,
        epochs: 8,
        cloud_size: 256,
        model: ModelConfig::default().with_feature_dim(128),
        ..TrainConfig::default()
    };
    let params = train(&cfg, &dataset)?.best;
    let held_out = dataset.subset(&training_split(&cfg, &dataset).val);

    let fmr = FmrRegistrar {
        name: "fmr".into(),
        params: &params,
        config: RegistrationConfig::default(),
    };
    let icp = IcpRegistrar {
        config: IcpConfig::default(),
    };
    let methods: [&dyn Registrar; 2] = [&fmr, &icp];
    let protocol = BenchProtocol {
        init_rot_angles_deg: vec![0.0, 20.0, 40.0, 60.0],
        trials_per_cell: 10,
        ..BenchProtocol::default()
    };
    print!("{}", bench_csv(&rotation_sweep(&methods, &held_out, &protocol)));
    print!("{}", bench_csv(&density_test(&methods, &held_out, &protocol, &[DEFAULT_KEEP_FRACTION])));
    print!("{}", bench_csv(&noise_test(&methods, &held_out, &protocol, &DEFAULT_NOISE_SIGMAS)));
    print!("{}", bench_csv(&overlap_test(&methods, &held_out, &protocol, &DEFAULT_CROP_FRACTIONS)));
    print!("{}", timing_csv(&timing_report(&methods, &[512, 2048], 10, 0)));
    Ok(())
}

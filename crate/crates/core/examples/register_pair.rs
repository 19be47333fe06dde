//! Registers one pair with the feature-metric solver and with ICP, printing
//! the residual trace of the feature-metric run.
//!
//! The network is trained briefly first; an untrained encoder still has the
//! exact fixed point but a poor basin.

use fmr::bench::{residual_trace, trace_csv};
use fmr::cloud::{sample_shape, ShapeFamily};
use fmr::losses::TrainMode;
use fmr::model::ModelConfig;
use fmr::registration::{icp_register, register, IcpConfig, RegistrationConfig};
use fmr::se3::{angular_error, random_transform_with_angle, translation_error};
use fmr::training::{train, Dataset, DatasetSpec, TrainConfig};
use fmr::util::seeded_rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = Dataset::synthesize(&DatasetSpec {
        families: vec![ShapeFamily::Box, ShapeFamily::Ellipsoid, ShapeFamily::Composite],
        per_family: 16,
        points: 256,
        seed: 1,
    })?;
    let cfg = TrainConfig {
        mode: TrainMode::Semi,
        epochs: 8,
        cloud_size: 256,
        model: ModelConfig::default().with_feature_dim(128),
        ..TrainConfig::default()
    };
    let params = train(&cfg, &dataset)?.best;

    let mut rng = seeded_rng(5);
    let p = sample_shape(ShapeFamily::Composite, 512, 99, &mut rng)?;
    let g_gt = random_transform_with_angle(25f64.to_radians(), 0.3, &mut rng);
    let q = g_gt.apply(&p);
    let truth = g_gt.inverse();

    let reg = RegistrationConfig::default();
    let fmr = register(&p, &q, &params, &reg)?;
    let icp = icp_register(&p, &q, &IcpConfig::default())?;
    for (name, g) in [("fmr", fmr.g_est), ("icp", icp.g_est)] {
        println!(
            "{name}: rotation error {:.4} deg, translation error {:.5}",
            angular_error(&g, &truth)?.to_degrees(),
            translation_error(&g, &truth)
        );
    }
    print!("{}", trace_csv(&residual_trace(&params, &p, &q, &reg, Some(&truth))?));
    Ok(())
}

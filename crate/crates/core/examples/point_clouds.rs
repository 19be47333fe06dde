//! Synthetic shapes, perturbations and the xyz / ply / off readers and writers.

use fmr::cloud::{self, sample_shape, CloudFormat, PerturbationSpec, ShapeFamily};
use fmr::util::seeded_rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seeded_rng(3);
    let dir = tempfile::tempdir()?;
    for family in ShapeFamily::ALL {
        let c = sample_shape(family, 1024, 42, &mut rng)?;
        let (lo, hi) = c.bounding_box();
        println!("{:10} {} points, box {:.3?} .. {:.3?}", family.to_string(), c.len(), lo.as_slice(), hi.as_slice());
    }

    let c = sample_shape(ShapeFamily::Composite, 1000, 7, &mut rng)?;
    let spec = PerturbationSpec {
        keep_fraction: 0.1,
        noise_sigma: 0.01,
        crop_fraction: 0.25,
        seed: 0,
    };
    let perturbed = spec.apply(&c, 11)?;
    println!("{} -> {} points after {}", c.len(), perturbed.len(), spec.tag());

    for (format, ext) in [(CloudFormat::Xyz, "xyz"), (CloudFormat::Ply, "ply"), (CloudFormat::Off, "off")] {
        let path = dir.path().join(format!("cloud.{ext}"));
        cloud::save(&perturbed, &path, format)?;
        let back = cloud::load(&path, format)?;
        println!("{}: {} points, {} bytes", path.display(), back.len(), std::fs::metadata(&path)?.len());
    }
    Ok(())
}

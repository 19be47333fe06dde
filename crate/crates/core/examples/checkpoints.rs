//! Saves a model to the binary checkpoint format and loads it back.

use fmr::model::{encode, ModelConfig, ModelParams};
use fmr::cloud::{sample_shape, ShapeFamily};
use fmr::tinynet::{load_checkpoint, save_checkpoint};
use fmr::util::seeded_rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = ModelParams::init(ModelConfig::default().with_feature_dim(256), 4)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params.to_checkpoint(), &path)?;
    let ckpt = load_checkpoint(&path)?;
    for (k, v) in &ckpt.meta {
        println!("{k} = {v}");
    }
    let loaded = ModelParams::from_checkpoint(&ckpt)?;
    let cloud = sample_shape(ShapeFamily::Box, 512, 1, &mut seeded_rng(1))?;
    println!(
        "{} bytes, features identical after reload: {}",
        std::fs::metadata(&path)?.len(),
        encode(&cloud, &params) == encode(&cloud, &loaded)
    );
    Ok(())
}

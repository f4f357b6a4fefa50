//! Draws several renderings of the same label map from a trained checkpoint by
//! resampling the edge-ensemble weights, and reports how far they differ.
//!
//! `cargo run --release --example generate_diverse -- <checkpoint_dir> [k] [out_dir]`

use std::path::PathBuf;

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sflow::datakit::{decode_palette, toy_samples, write_rgb_png, ToySpec, TOY_PALETTE};
use sflow::dned::sample_ensemble_weights_with;
use sflow::metrics::{segmentation_scores, ConfusionMatrix};
use sflow::synthesis::{EdgeSource, TrainedModels};
use sflow::{Error, Result};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).map(PathBuf::from).ok_or_else(|| {
        Error::Validation("usage: generate_diverse <checkpoint_dir> [k] [out_dir]".into())
    })?;
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let out = args
        .get(3)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("diverse_out"));
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;

    let models = TrainedModels::load(&ckpt, &Device::Cpu)?;
    let data = toy_samples(&ToySpec::new(7, 2), &models.config.laplacian)?;
    let palette = &TOY_PALETTE[..models.config.n_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in &data {
        let mut variants = Vec::new();
        for v in 0..k {
            let w = sample_ensemble_weights_with(models.config.alpha, &mut rng)?;
            let img = models.generate(&s.semantic, &s.image, &EdgeSource::Dned(w))?;
            let mut cm = ConfusionMatrix::new(palette.len());
            cm.accumulate(&s.semantic, &decode_palette(&img, palette)?)?;
            println!(
                "{} v{v}: palette accuracy {:.3}",
                s.name,
                segmentation_scores(&cm)?.pixel_accuracy
            );
            write_rgb_png(&out.join(format!("{}_v{v}.png", s.name)), &img)?;
            variants.push(img);
        }
        let mut diffs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                diffs.push(variants[i].mean_abs_diff(&variants[j])?);
            }
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
        println!("{}: mean pairwise L1 between variants {mean:.4}", s.name);
    }
    println!("wrote {}", out.display());
    Ok(())
}

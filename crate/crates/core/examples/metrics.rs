//! Distribution and segmentation metrics on procedural data: FID against
//! increasing noise, FVD against temporally shuffled clips, and palette
//! segmentation scores of a corrupted image.
//!
//! `cargo run --release --example metrics`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sflow::datakit::{
    decode_palette, group_sequences, toy_samples, ToyMotion, ToySpec, TOY_PALETTE,
};
use sflow::edges::LaplacianConfig;
use sflow::metrics::{embedder_by_name, fid, fvd, segmentation_scores, ConfusionMatrix, EMBEDDERS};
use sflow::tensor::ImageTensor;
use sflow::Result;

fn main() -> Result<()> {
    let lap = LaplacianConfig::default();
    let real: Vec<ImageTensor> = toy_samples(&ToySpec::new(11, 16), &lap)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noisy = |sigma: f32| -> Result<Vec<ImageTensor>> {
        real.iter()
            .map(|img| {
                let data = img
                    .data()
                    .iter()
                    .map(|v| v + sigma * rng.random_range(-1.0f32..1.0))
                    .collect();
                ImageTensor::new_clamped(img.channels(), img.height(), img.width(), data)
            })
            .collect()
    };
    let sets = [noisy(0.0)?, noisy(0.1)?, noisy(0.2)?, noisy(0.4)?];
    for name in EMBEDDERS {
        let emb = embedder_by_name(name)?;
        let row: Vec<String> = sets
            .iter()
            .map(|s| fid(&real, s, emb.as_ref()).map(|v| format!("{v:9.4}")))
            .collect::<Result<_>>()?;
        println!("FID {name:>14} at noise 0/0.1/0.2/0.4: {}", row.join(" "));
    }

    let spec = |seed| ToySpec {
        motion: Some(ToyMotion {
            frames: 4,
            max_speed: 2,
        }),
        ..ToySpec::new(seed, 8)
    };
    let clips = |seed| -> Result<Vec<Vec<ImageTensor>>> {
        Ok(group_sequences(&toy_samples(&spec(seed), &lap)?)
            .into_iter()
            .map(|c| c.into_iter().map(|f| f.image).collect())
            .collect())
    };
    let (a, b) = (clips(21)?, clips(22)?);
    let shuffled: Vec<Vec<ImageTensor>> = b
        .iter()
        .map(|c| [2, 0, 3, 1].iter().map(|&i| c[i].clone()).collect())
        .collect();
    let emb = embedder_by_name("frame_stats")?;
    println!(
        "FVD frame_stats: ordered {:.4}  shuffled {:.4}",
        fvd(&a, &b, emb.as_ref())?,
        fvd(&a, &shuffled, emb.as_ref())?
    );

    let sample = toy_samples(&ToySpec::new(3, 1), &lap)?.remove(0);
    let palette = &TOY_PALETTE[..sample.semantic.n_classes()];
    for sigma in [0.0, 0.2, 0.5] {
        let img = &noisy_one(&sample.image, sigma, &mut rng)?;
        let mut cm = ConfusionMatrix::new(palette.len());
        cm.accumulate(&sample.semantic, &decode_palette(img, palette)?)?;
        let s = segmentation_scores(&cm)?;
        println!(
            "palette decode at noise {sigma:.1}: pixel acc {:.3}  mIoU {:.3}",
            s.pixel_accuracy, s.mean_iou
        );
    }
    Ok(())
}

fn noisy_one(img: &ImageTensor, sigma: f32, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let data = img
        .data()
        .iter()
        .map(|v| v + sigma * rng.random_range(-1.0f32..1.0))
        .collect();
    ImageTensor::new_clamped(img.channels(), img.height(), img.width(), data)
}

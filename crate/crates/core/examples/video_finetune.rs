//! Fine-tunes a trained model with the flow loss on procedural motion clips
//! and compares held-out flow loss and per-frame FID before and after.
//!
//! `cargo run --release --example video_finetune -- <checkpoint_dir> [steps] [flow_weight] [train_frames]`
//!
//! Training clips have `train_frames` frames (default 2); held-out clips have two.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::Device;
use sflow::datakit::{group_sequences, toy_samples, ToyMotion, ToySpec};
use sflow::metrics::{embedder_by_name, fid};
use sflow::synthesis::{EdgeSource, TrainedModels};
use sflow::video::{
    finetune_video, generate_sequence, mean_flow_loss, SequenceSample, VideoConfig, VideoOptions,
};
use sflow::Result;

fn clips(
    seed: u64,
    n: usize,
    frames: usize,
    models: &TrainedModels,
) -> Result<Vec<SequenceSample>> {
    let spec = ToySpec {
        motion: Some(ToyMotion {
            frames,
            ..ToyMotion::default()
        }),
        ..ToySpec::new(seed, n)
    };
    group_sequences(&toy_samples(&spec, &models.config.laplacian)?)
        .into_iter()
        .map(SequenceSample::new)
        .collect()
}

fn frame_fid(models: &TrainedModels, seqs: &[SequenceSample]) -> Result<f64> {
    let emb = embedder_by_name("random_conv64")?;
    let mode = EdgeSource::for_phase(models.phase);
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for s in seqs {
        let inputs: Vec<_> = s
            .frames()
            .iter()
            .map(|f| (f.semantic.clone(), f.image.clone()))
            .collect();
        fake.extend(generate_sequence(models, &inputs, &mode)?);
        real.extend(s.frames().iter().map(|f| f.image.clone()));
    }
    fid(&real, &fake, emb.as_ref())
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = PathBuf::from(
        args.get(1)
            .expect("usage: video_finetune <checkpoint_dir> [steps] [flow_weight] [train_frames]"),
    );
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let train_frames: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let models = TrainedModels::load(&ckpt, &Device::Cpu)?;
    let train = clips(100, 4, train_frames, &models)?;
    let held_out = clips(200, 4, 2, &models)?;
    let flow_weight: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let cfg = VideoConfig {
        steps,
        flow_weight,
        ..VideoConfig::default()
    };

    let start = Instant::now();
    let before = mean_flow_loss(&models, &held_out, &cfg.flow)?;
    let fid_before = frame_fid(&models, &held_out)?;
    println!(
        "before: flow loss {before:.4}  FID {fid_before:.4}  ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
    let out = finetune_video(models, &train, &cfg, 0, VideoOptions::default())?;
    for r in out.log.iter().filter(|r| r.step % 10 == 0) {
        println!(
            "step {:4}  flow {:.4}  total {:.4}",
            r.step, r.flow, r.total
        );
    }
    let after = mean_flow_loss(&out.models, &held_out, &cfg.flow)?;
    let fid_after = frame_fid(&out.models, &held_out)?;
    println!(
        "after:  flow loss {after:.4} ({:.0}% of before)  FID {fid_after:.4}  ({:.0}s)",
        100.0 * after / before,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

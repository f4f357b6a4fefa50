//! Overfits the image model on eight procedural scenes and reports the
//! mean reconstruction error as training progresses.
//!
//! `cargo run --release --example train_toy -- [scales] [steps] [checkpoint_dir]`

use std::path::PathBuf;
use std::time::Instant;

use sflow::datakit::{toy_samples, PairedSample, ToySpec};
use sflow::synthesis::{
    train_cg2real, EdgeSource, StepRecord, TrainConfig, TrainOptions, TrainedModels,
};
use sflow::Result;

fn mean_l1(models: &TrainedModels, data: &[PairedSample]) -> Result<f64> {
    let mode = EdgeSource::for_phase(models.phase);
    let mut total = 0.0;
    for s in data {
        total += models
            .generate(&s.semantic, &s.image, &mode)?
            .mean_abs_diff(&s.image)?;
    }
    Ok(total / data.len() as f64)
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let scales: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let save = args.get(3).map(PathBuf::from);
    let config = TrainConfig {
        discriminator_scales: scales,
        max_steps: Some(steps),
        ..TrainConfig::toy()
    };
    let data = toy_samples(&ToySpec::new(7, 8), &config.laplacian)?;
    let start = Instant::now();
    let mut hook = |r: &StepRecord, m: &TrainedModels| -> Result<()> {
        if r.step == 1 || r.step.is_multiple_of(10) {
            println!(
                "step {:4} {:?}  L1 {:.4}  D {:.3}  G {:.3}  fm {:.3}  percep {:.3}  dned {:.3}  {:.0}s",
                r.step,
                m.phase,
                mean_l1(m, &data)?,
                r.loss_d,
                r.loss_g_adv,
                r.fm,
                r.percep,
                r.dned,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    };
    let out = train_cg2real(
        &config,
        &data,
        0,
        TrainOptions {
            hook: Some(&mut hook),
            ..Default::default()
        },
    )?;
    if let Some(dir) = save {
        out.models.save(&dir)?;
        println!("saved to {}", dir.display());
    }
    Ok(())
}

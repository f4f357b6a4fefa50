//! Writes a procedural dataset to disk, reads it back through the loader and
//! prints a summary of each split.
//!
//! `cargo run --release --example toy_data -- [out_dir]`

use std::path::PathBuf;

use sflow::datakit::{
    group_sequences, load_paired_dataset, synth_toy_dataset, DatasetManifest, Split, ToyMotion,
    ToySpec,
};
use sflow::edges::LaplacianConfig;
use sflow::Result;

fn main() -> Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("toy_data"));
    synth_toy_dataset(&root, Split::Train, &ToySpec::new(7, 8))?;
    let motion = ToySpec {
        motion: Some(ToyMotion {
            frames: 3,
            max_speed: 2,
        }),
        ..ToySpec::new(8, 4)
    };
    synth_toy_dataset(&root, Split::Val, &motion)?;

    let lap = LaplacianConfig::default();
    for split in [Split::Train, Split::Val] {
        let manifest = DatasetManifest::open(&root, split)?;
        let samples = load_paired_dataset(&manifest, &lap)?;
        let clips = group_sequences(&samples);
        let edge_frac: f64 = samples
            .iter()
            .map(|s| s.source_edge.count_on() as f64 / s.source_edge.data().len() as f64)
            .sum::<f64>()
            / samples.len() as f64;
        println!(
            "{split}: {} samples at {}x{}, {} classes, {} clip(s), {:.1}% Laplacian edge pixels",
            samples.len(),
            manifest.resolution[0],
            manifest.resolution[1],
            manifest.n_classes,
            clips.len(),
            100.0 * edge_frac
        );
    }
    println!("wrote {}", root.display());
    Ok(())
}

//! Laplacian edges of a procedural scene next to the side outputs of an
//! untrained edge detector and two random ensembles of them.
//!
//! `cargo run --release --example edges -- [out_dir]`

use std::path::PathBuf;

use candle_core::{DType, Device};
use sflow::datakit::{toy_samples, write_edge_png, write_rgb_png, ToySpec};
use sflow::dned::{
    dned_forward, ensemble_edges, sample_ensemble_weights, DnedConfig, DnedNetwork, EnsembleWeights,
};
use sflow::edges::{laplacian_edge_map, LaplacianConfig, LaplacianKernel};
use sflow::{Error, Result};

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("edges_out"));
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    let sample = toy_samples(&ToySpec::new(1, 1), &LaplacianConfig::default())?.remove(0);
    write_rgb_png(&out.join("image.png"), &sample.image)?;

    for kernel in [
        LaplacianKernel::FourNeighbor,
        LaplacianKernel::EightNeighbor,
    ] {
        for threshold in [0.05, 0.2, 0.5] {
            let cfg = LaplacianConfig { kernel, threshold };
            let edges = laplacian_edge_map(&sample.image, &cfg)?;
            let frac = edges.count_on() as f64 / edges.data().len() as f64;
            println!(
                "{kernel:?} threshold {threshold:.2}: {:.1}% edge pixels",
                100.0 * frac
            );
            write_edge_png(
                &out.join(format!("laplacian_{kernel:?}_{threshold}.png")),
                &edges,
            )?;
        }
    }

    let laplacian = LaplacianConfig::default();
    let net = DnedNetwork::new(DnedConfig::default(), 0, DType::F32, &Device::Cpu)?;
    let sides = dned_forward(&net, &sample.image, &laplacian)?;
    for (i, side) in sides.iter().enumerate() {
        write_edge_png(&out.join(format!("side_{i}.png")), side)?;
    }
    for (name, w) in [
        ("uniform", EnsembleWeights::uniform()),
        ("random_a", sample_ensemble_weights(3.0, 1)?),
        ("random_b", sample_ensemble_weights(3.0, 2)?),
    ] {
        let fused = ensemble_edges(&sides, &w)?;
        let weights: Vec<String> = w.as_array().iter().map(|v| format!("{v:.2}")).collect();
        println!("ensemble {name}: weights [{}]", weights.join(" "));
        write_edge_png(&out.join(format!("ensemble_{name}.png")), &fused)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

//! Recovers known translations of a smooth texture and reports the endpoint
//! error and the photometric error after warping back.
//!
//! `cargo run --release --example optical_flow -- [smoothness]`

use sflow::flow::{estimate_flow, warp, FlowConfig, FlowField};
use sflow::tensor::ImageTensor;
use sflow::Result;

const SIZE: usize = 64;

fn scene(dx: f64, dy: f64) -> Result<ImageTensor> {
    let data = (0..SIZE * SIZE)
        .map(|i| {
            let (x, y) = ((i % SIZE) as f64 - dx, (i / SIZE) as f64 - dy);
            (0.5 * (0.3 * x).sin() * (0.25 * y).cos() + 0.3 * (0.15 * x - 0.2 * y).sin()) as f32
        })
        .collect();
    ImageTensor::new(1, SIZE, SIZE, data)
}

fn main() -> Result<()> {
    let mut cfg = FlowConfig::default();
    if let Some(s) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.smoothness = s;
    }
    cfg.validate()?;
    let interior = |y: usize, x: usize| (8..SIZE - 8).contains(&y) && (8..SIZE - 8).contains(&x);
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, -1.0), (1.5, 1.0), (-2.0, 1.0)] {
        let a = scene(0.0, 0.0)?;
        let b = scene(dx, dy)?;
        let flow = estimate_flow(&a, &b, &cfg)?;
        let epe = flow.mean_epe(
            &FlowField::constant(SIZE, SIZE, dx as f32, dy as f32),
            interior,
        )?;
        let warped = warp(&b, &flow)?;
        println!(
            "shift ({dx:+.1},{dy:+.1}): EPE {epe:.3}  |a-b| {:.4}  |a-warp(b)| {:.4}",
            a.mean_abs_diff(&b)?,
            a.mean_abs_diff(&warped)?
        );
    }
    Ok(())
}

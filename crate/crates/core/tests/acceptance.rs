//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Trained models are shared between the criteria that need them.
//! Positional arguments select criteria by substring.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::Device;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sflow::cli::run_cli;
use sflow::datakit::{
    decode_palette, group_sequences, toy_samples, PairedSample, ToyMotion, ToySpec, TOY_PALETTE,
};
use sflow::dned::sample_ensemble_weights_with;
use sflow::edges::{laplacian_edge_map, LaplacianConfig, LaplacianKernel};
use sflow::flow::{estimate_flow, FlowConfig, FlowField};
use sflow::metrics::{
    fid, frechet_distance, fvd, GaussianStats, IdentityEmbedder, RandomConvEmbedder,
    RANDOM_CONV_SEED,
};
use sflow::synthesis::{
    train_cg2real, EdgeSource, StepRecord, TrainConfig, TrainOptions, TrainedModels,
};
use sflow::tensor::ImageTensor;
use sflow::video::{
    finetune_video, generate_sequence, mean_flow_loss, SequenceSample, VideoConfig, VideoOptions,
};
use sflow::Result;

type Outcome = Result<(bool, String)>;

struct Harness {
    failed: Vec<&'static str>,
    /// Substrings selecting criteria to run; empty runs all of them.
    filters: Vec<String>,
}

impl Harness {
    fn check(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        if !self.filters.is_empty() && !self.filters.iter().any(|p| name.contains(p.as_str())) {
            return;
        }
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !ok {
            self.failed.push(name);
        }
    }
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

// ---------------------------------------------------------------- edges

fn brute_force_laplacian(img: &ImageTensor, cfg: &LaplacianConfig) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let k = cfg.kernel.weights();
    let gray = |y: usize, x: usize| -> f32 {
        if img.channels() == 1 {
            img.at(0, y, x)
        } else {
            0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x)
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut r = 0.0f32;
            for (dy, row) in k.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    let yy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                    r += kv * gray(yy, xx);
                }
            }
            out[y * w + x] = if r.abs() > cfg.threshold { 1.0 } else { 0.0 };
        }
    }
    out
}

fn edge_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    for i in 0..100 {
        let channels = if i % 2 == 0 { 1 } else { 3 };
        let data: Vec<f32> = (0..channels * 256)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let img = ImageTensor::new(channels, 16, 16, data)?;
        let cfg = LaplacianConfig {
            kernel: if i % 4 < 2 {
                LaplacianKernel::FourNeighbor
            } else {
                LaplacianKernel::EightNeighbor
            },
            threshold: rng.random_range(0.05..1.5),
        };
        let got = laplacian_edge_map(&img, &cfg)?;
        mismatches += got
            .data()
            .iter()
            .zip(brute_force_laplacian(&img, &cfg))
            .filter(|(a, b)| **a != *b)
            .count();
    }
    let ok = mismatches == 0 && within(start, Duration::from_secs(5));
    Ok((
        ok,
        format!("{mismatches} mismatching pixels over 100 random 16x16 images"),
    ))
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let errs = common::gradient_suite()?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        worst <= 1e-3 && within(start, Duration::from_secs(120)),
        detail,
    ))
}

// ---------------------------------------------------------------- Fréchet

fn frechet_math() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_closed = 0.0f64;
    let mut worst_sym = 0.0f64;
    for _ in 0..1000 {
        let mu_a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu_b: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let va: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..3.0)).collect();
        let vb: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..3.0)).collect();
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(v));
        let a = GaussianStats::new(mu_a.clone(), diag(&va))?;
        let b = GaussianStats::new(mu_b.clone(), diag(&vb))?;
        let closed: f64 = (0..5)
            .map(|d| (mu_a[d] - mu_b[d]).powi(2) + (va[d].sqrt() - vb[d].sqrt()).powi(2))
            .sum();
        let ab = frechet_distance(&a, &b)?;
        worst_closed = worst_closed.max((ab - closed).abs());
        worst_sym = worst_sym.max((ab - frechet_distance(&b, &a)?).abs());
    }
    let x: Vec<ImageTensor> = toy_samples(&ToySpec::new(3, 6), &LaplacianConfig::default())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let self_fid = fid(&x, &x, &RandomConvEmbedder::new(RANDOM_CONV_SEED)?)?;
    let ok = worst_closed <= 1e-6
        && self_fid <= 1e-6
        && worst_sym <= 1e-8
        && within(start, Duration::from_secs(30));
    Ok((
        ok,
        format!("closed-form err {worst_closed:.1e}, FID(X,X) {self_fid:.1e}, asymmetry {worst_sym:.1e}"),
    ))
}

// ---------------------------------------------------------------- flow

fn texture(x: f64, y: f64) -> f32 {
    (0.45 * (0.31 * x + 0.7).sin() * (0.23 * y).cos()
        + 0.35 * (0.17 * x - 0.29 * y).sin()
        + 0.15 * (0.53 * y + 0.11 * x).cos()) as f32
}

fn shifted(dx: i32, dy: i32) -> Result<ImageTensor> {
    let (h, w) = (64, 64);
    let data = (0..h * w)
        .map(|i| texture((i % w) as f64 - dx as f64, (i / w) as f64 - dy as f64))
        .collect();
    ImageTensor::new(1, h, w, data)
}

fn flow_accuracy() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for (dx, dy) in [(1, 0), (0, 1), (-1, 1), (2, -1)] {
        let a = shifted(0, 0)?;
        let b = shifted(dx, dy)?;
        let est = estimate_flow(&a, &b, &FlowConfig::default())?;
        let truth = FlowField::constant(64, 64, dx as f32, dy as f32);
        let epe = est.mean_epe(&truth, |y, x| (8..56).contains(&y) && (8..56).contains(&x))?;
        ok &= epe <= 0.25;
        details.push(format!("({dx},{dy}) EPE {epe:.3}"));
    }
    Ok((
        ok && within(start, Duration::from_secs(30)),
        details.join(", "),
    ))
}

// ---------------------------------------------------------------- toy overfit

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

fn toy_overfit(scales: usize, slot: &mut Option<TrainedModels>) -> Outcome {
    let start = Instant::now();
    let config = TrainConfig {
        discriminator_scales: scales,
        ..TrainConfig::toy()
    };
    let data = toy_samples(&ToySpec::new(7, 8), &config.laplacian)?;
    let mut at10 = f64::NAN;
    let mut finite = true;
    let mut hook = |r: &StepRecord, m: &TrainedModels| -> Result<()> {
        finite &= [r.loss_d, r.loss_g_adv, r.fm, r.percep, r.dned, r.total]
            .iter()
            .all(|v| v.is_finite());
        if r.step == 10 {
            at10 = mean_l1(m, &data)?;
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
    let steps = out.log.len();
    let at200 = mean_l1(&out.models, &data)?;
    let drop = 1.0 - at200 / at10;
    let ok = steps == 200 && finite && drop >= 0.40 && within(start, Duration::from_secs(600));
    *slot = Some(out.models);
    Ok((
        ok,
        format!("l_m={scales}: L1 {at10:.4} @10 -> {at200:.4} @200 ({:.1}% drop), {steps} steps, finite={finite}", drop * 100.0),
    ))
}

// ---------------------------------------------------------------- video

const VIDEO_STEPS: usize = 150;
const VIDEO_FLOW_WEIGHT: f64 = 10.0;
/// Training clips are longer than held-out ones: more distinct pairs per clip.
const VIDEO_TRAIN_FRAMES: usize = 6;

fn clips(seed: u64, n: usize, frames: usize, cfg: &LaplacianConfig) -> Result<Vec<SequenceSample>> {
    let spec = ToySpec {
        motion: Some(ToyMotion {
            frames,
            ..ToyMotion::default()
        }),
        ..ToySpec::new(seed, n)
    };
    group_sequences(&toy_samples(&spec, cfg)?)
        .into_iter()
        .map(SequenceSample::new)
        .collect()
}

fn frame_fid(models: &TrainedModels, seqs: &[SequenceSample]) -> Result<f64> {
    let mode = EdgeSource::for_phase(models.phase);
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for s in seqs {
        let inputs: Vec<_> = s
            .frames()
            .iter()
            .map(|f| (f.semantic.clone(), f.image.clone()))
            .collect();
        fake.extend(generate_sequence(models, &inputs, &mode)?);
        real.extend(s.frames().iter().map(|f| f.image.clone()));
    }
    fid(&real, &fake, &RandomConvEmbedder::new(RANDOM_CONV_SEED)?)
}

fn video_finetune(pretrained: Option<&TrainedModels>) -> Outcome {
    let start = Instant::now();
    let Some(pre) = pretrained else {
        return Ok((
            false,
            "no pretrained model (toy overfit failed to run)".into(),
        ));
    };
    // Round-trip through a checkpoint, as the CLI does.
    let dir = tempfile::tempdir().map_err(|e| sflow::Error::Validation(e.to_string()))?;
    pre.save(dir.path())?;
    let models = TrainedModels::load(dir.path(), &Device::Cpu)?;
    let train = clips(100, 4, VIDEO_TRAIN_FRAMES, &models.config.laplacian)?;
    let held_out = clips(200, 4, 2, &models.config.laplacian)?;
    let cfg = VideoConfig {
        steps: VIDEO_STEPS,
        flow_weight: VIDEO_FLOW_WEIGHT,
        ..VideoConfig::default()
    };
    let flow_before = mean_flow_loss(&models, &held_out, &cfg.flow)?;
    let fid_before = frame_fid(&models, &held_out)?;
    let out = finetune_video(models, &train, &cfg, 0, VideoOptions::default())?;
    let flow_after = mean_flow_loss(&out.models, &held_out, &cfg.flow)?;
    let fid_after = frame_fid(&out.models, &held_out)?;
    let ok = flow_after <= 0.5 * flow_before
        && fid_after <= 1.1 * fid_before
        && within(start, Duration::from_secs(900));
    Ok((
        ok,
        format!(
            "held-out flow loss {flow_before:.4} -> {flow_after:.4} ({:.0}%), frame FID {fid_before:.4} -> {fid_after:.4} ({:+.1}%)",
            100.0 * flow_after / flow_before,
            100.0 * (fid_after / fid_before - 1.0)
        ),
    ))
}

// ---------------------------------------------------------------- diversity

fn diversity(model: Option<&TrainedModels>) -> Outcome {
    let Some(m) = model else {
        return Ok((false, "no trained model".into()));
    };
    let data = toy_samples(&ToySpec::new(7, 8), &m.config.laplacian)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_pair = f64::INFINITY;
    let mut min_acc = f64::INFINITY;
    for s in data.iter().take(4) {
        let mut variants = Vec::new();
        for _ in 0..5 {
            let w = sample_ensemble_weights_with(m.config.alpha, &mut rng)?;
            let img = m.generate(&s.semantic, &s.image, &EdgeSource::Dned(w))?;
            let decoded = decode_palette(&img, &TOY_PALETTE[..m.config.n_classes])?;
            let hits = decoded
                .labels()
                .iter()
                .zip(s.semantic.labels())
                .filter(|(a, b)| a == b)
                .count();
            min_acc = min_acc.min(hits as f64 / decoded.labels().len() as f64);
            variants.push(img);
        }
        for i in 0..5 {
            for j in i + 1..5 {
                min_pair = min_pair.min(variants[i].mean_abs_diff(&variants[j])?);
            }
        }
    }
    Ok((
        min_pair > 0.0 && min_acc >= 0.9,
        format!("min pairwise L1 {min_pair:.2e}, min palette pixel accuracy {min_acc:.3} (K=5, 4 inputs)"),
    ))
}

// ---------------------------------------------------------------- determinism

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// The only run directory under `root`.
fn run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs.pop().expect("a run directory")
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| sflow::Error::Validation(e.to_string()))?;
    let t = tmp.path();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let mut report = Vec::new();
    let mut ok = true;
    let mut run_twice =
        |name: &str, args: &dyn Fn(usize) -> Vec<String>, out: &dyn Fn(usize) -> PathBuf| {
            let codes: Vec<i32> = (0..2)
                .map(|k| run_cli(std::iter::once("sflow".to_string()).chain(args(k))))
                .collect();
            let verdict = if codes != [0, 0] {
                format!("exit codes {codes:?}")
            } else {
                let (a, b) = (files_under(&out(0)), files_under(&out(1)));
                let differing: Vec<String> = a
                    .keys()
                    .chain(b.keys())
                    .filter(|k| a.get(*k) != b.get(*k))
                    .map(|k| k.display().to_string())
                    .collect();
                if a.is_empty() {
                    "no output".into()
                } else if differing.is_empty() {
                    "identical".into()
                } else {
                    format!("DIFFERENT ({})", differing.join(" "))
                }
            };
            ok &= verdict == "identical";
            report.push(format!("{name} {verdict}"));
        };
    let data = |k: usize| t.join(format!("data{k}"));
    let root = |tag: &str, k: usize| t.join(format!("{tag}{k}"));
    run_twice(
        "make-toy-data",
        &|k| {
            [
                "make-toy-data",
                "--out",
                &s(data(k)),
                "--seed",
                "7",
                "--n",
                "2",
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| data(k),
    );
    run_twice(
        "make-toy-data(motion)",
        &|k| {
            [
                "make-toy-data",
                "--out",
                &s(data(k)),
                "--seed",
                "8",
                "--n",
                "2",
                "--frames",
                "2",
                "--split",
                "val",
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| data(k).join("val"),
    );
    run_twice(
        "train",
        &|k| {
            [
                "train",
                "--data",
                &s(data(0)),
                "--max-steps",
                "2",
                "--seed",
                "3",
                "--run-root",
                &s(root("train", k)),
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| run_dir(&root("train", k)),
    );
    let ckpt = run_dir(&root("train", 0))
        .join("checkpoints")
        .join("latest");
    run_twice(
        "video-finetune",
        &|k| {
            [
                "video-finetune",
                "--checkpoint",
                &s(ckpt.clone()),
                "--data",
                &s(data(0)),
                "--split",
                "val",
                "--steps",
                "2",
                "--seed",
                "1",
                "--run-root",
                &s(root("video", k)),
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| run_dir(&root("video", k)),
    );
    run_twice(
        "generate",
        &|k| {
            [
                "generate",
                "--checkpoint",
                &s(ckpt.clone()),
                "--data",
                &s(data(0)),
                "--split",
                "train",
                "--edge-samples",
                "2",
                "--dump-edges",
                "--seed",
                "4",
                "--run-root",
                &s(root("gen", k)),
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| run_dir(&root("gen", k)),
    );
    let fake = run_dir(&root("gen", 0)).join("samples");
    let real = data(0).join("train").join("images");
    run_twice(
        "eval",
        &|k| {
            [
                "eval",
                "--real",
                &s(real.clone()),
                "--fake",
                &s(real.clone()),
                "--run-root",
                &s(root("eval", k)),
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| run_dir(&root("eval", k)),
    );
    run_twice(
        "grid",
        &|k| {
            [
                "grid",
                "--data",
                &s(data(0)),
                "--split",
                "train",
                "--fake",
                &s(real.clone()),
                "--run-root",
                &s(root("grid", k)),
            ]
            .map(String::from)
            .to_vec()
        },
        &|k| run_dir(&root("grid", k)),
    );
    // generate --edge-samples wrote `<name>_v<k>.png`; check they exist.
    ok &= fake.join("000000_v1.png").exists();
    // Run directories embed a timestamp, so only their contents are compared.
    Ok((ok, report.join(", ")))
}

// ---------------------------------------------------------------- metrics

fn metric_monotonicity() -> Outcome {
    let real: Vec<ImageTensor> = toy_samples(&ToySpec::new(11, 8), &LaplacianConfig::default())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fids = Vec::new();
    for sigma in [0.1f32, 0.2, 0.3] {
        let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
        let noisy = real
            .iter()
            .map(|img| {
                let data = img
                    .data()
                    .iter()
                    .map(|v| v + normal.sample(&mut rng))
                    .collect();
                ImageTensor::new_clamped(img.channels(), img.height(), img.width(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        fids.push(fid(&real, &noisy, &IdentityEmbedder)?);
    }
    let fid_ok = fids.windows(2).all(|w| w[1] > w[0]);

    let spec = |seed| ToySpec {
        motion: Some(ToyMotion {
            frames: 4,
            max_speed: 2,
        }),
        ..ToySpec::new(seed, 6)
    };
    let clip_frames = |seed| -> Result<Vec<Vec<ImageTensor>>> {
        Ok(
            group_sequences(&toy_samples(&spec(seed), &LaplacianConfig::default())?)
                .into_iter()
                .map(|c| c.into_iter().map(|f| f.image).collect())
                .collect(),
        )
    };
    let real_clips = clip_frames(21)?;
    let ordered = clip_frames(22)?;
    let shuffled: Vec<Vec<ImageTensor>> = ordered
        .iter()
        .map(|c| [2, 0, 3, 1].iter().map(|&i| c[i].clone()).collect())
        .collect();
    let fvd_ordered = fvd(&real_clips, &ordered, &IdentityEmbedder)?;
    let fvd_shuffled = fvd(&real_clips, &shuffled, &IdentityEmbedder)?;
    Ok((
        fid_ok && fvd_shuffled > fvd_ordered,
        format!(
            "FID at sigma 0.1/0.2/0.3: {:.2}/{:.2}/{:.2}; FVD ordered {fvd_ordered:.2} < shuffled {fvd_shuffled:.2}",
            fids[0], fids[1], fids[2]
        ),
    ))
}

fn main() {
    let filters = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut h = Harness {
        failed: Vec::new(),
        filters,
    };
    h.check("edge_oracle", edge_oracle);
    h.check("gradient_suite", gradient_suite);
    h.check("frechet_math", frechet_math);
    h.check("flow_accuracy", flow_accuracy);
    let mut single = None;
    let mut multi = None;
    h.check("toy_overfit_single_scale", || toy_overfit(1, &mut single));
    h.check("toy_overfit_three_scales", || toy_overfit(3, &mut multi));
    h.check("video_finetune", || video_finetune(single.as_ref()));
    h.check("diversity", || diversity(single.as_ref()));
    h.check("determinism", determinism);
    h.check("metric_monotonicity", metric_monotonicity);
    if h.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!(
            "acceptance: {} failed: {}",
            h.failed.len(),
            h.failed.join(", ")
        );
        std::process::exit(1);
    }
}

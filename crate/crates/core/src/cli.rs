//! Batch entry points. Every command that produces artifacts writes them to
//! a run directory `<run-root>/<timestamp>-<tag>/{config,checkpoints,logs,samples}`;
//! the run root defaults to `runs` and can be overridden with `SFLOW_RUN_ROOT`
//! or `--run-root`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datakit::{
    group_sequences, list_png_stems, load_paired_dataset, read_label_png, read_rgb_png,
    synth_toy_dataset, write_edge_png, write_rgb_png, DatasetManifest, Split, ToyMotion, ToySpec,
};
use crate::dned::{sample_ensemble_weights_with, EnsembleWeights};
use crate::error::{Error, Result};
use crate::metrics::{
    embedder_by_name, fid, fvd, segmentation_scores, ConfusionMatrix, MetricsReport,
};
use crate::synthesis::{
    train_cg2real, EdgeSource, Phase, TrainConfig, TrainOptions, TrainedModels,
};
use crate::tensor::{ImageTensor, SemanticMap};
use crate::video::{finetune_video, SequenceSample, VideoConfig, VideoOptions};

pub const RUN_ROOT_ENV: &str = "SFLOW_RUN_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "sflow",
    version,
    about = "Semantic-map to image synthesis with learned edges and flow fine-tuning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural paired dataset.
    MakeToyData(MakeToyData),
    /// Train the image model.
    Train(Train),
    /// Fine-tune a trained model with the flow loss.
    VideoFinetune(VideoFinetune),
    /// Generate images for every sample of a dataset split.
    Generate(Generate),
    /// Compute FID / FVD / segmentation scores.
    Eval(Eval),
    /// Write label | edges | generated | real montages.
    Grid(Grid),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Parent of run directories (overrides SFLOW_RUN_ROOT).
    #[arg(long)]
    pub run_root: Option<PathBuf>,
    /// Suffix of the run directory name.
    #[arg(long, default_value = "run")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct MakeToyData {
    #[arg(long, default_value = "data/toy")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stills, or clips with `--frames`.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Emit motion clips of this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub max_speed: i32,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset root (containing `<split>/manifest.json`).
    #[arg(long, default_value = "data/toy")]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// TOML file with `TrainConfig` keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Discriminator scales.
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct VideoFinetune {
    /// Checkpoint directory of a trained model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// TOML file with `VideoConfig` keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub flow_weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EdgeMode {
    /// Detector ensemble once trained jointly, Laplacian otherwise.
    Auto,
    Laplacian,
    Dned,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Output directory (default: the run's `samples/`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Variants per input, each with Dirichlet-sampled ensemble weights.
    #[arg(long, default_value_t = 1)]
    pub edge_samples: usize,
    /// Dirichlet concentration (default: the model's configured value).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = EdgeMode::Auto)]
    pub edges: EdgeMode,
    /// Also write the conditioning edge maps.
    #[arg(long)]
    pub dump_edges: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Directory of real images (clips as subdirectories).
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of generated images with the same layout.
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long, default_value = "random_conv64")]
    pub embedder: String,
    /// Ground-truth label directory for segmentation scores.
    #[arg(long, requires = "pred_labels")]
    pub gt_labels: Option<PathBuf>,
    /// Predicted label directory (segmenter output on the fakes).
    #[arg(long, requires = "gt_labels")]
    pub pred_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub classes: usize,
    /// Report path (default: the run's `logs/metrics.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct Grid {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Generated images named like the dataset samples.
    #[arg(long)]
    pub fake: PathBuf,
    /// Draw the detector ensemble edges of this checkpoint instead of the
    /// Laplacian edges.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::MissingCheckpoint(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeToyData(a) => make_toy_data(a),
        Command::Train(a) => train(a),
        Command::VideoFinetune(a) => video_finetune(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(a),
    }
}

/// Creates `<root>/<timestamp>-<tag>` with its standard subdirectories.
pub fn create_run_dir(args: &RunArgs) -> Result<PathBuf> {
    let root = args
        .run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("{stamp}-{}", args.tag));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{}-{k}", args.tag));
        k += 1;
    }
    for sub in ["config", "checkpoints", "logs", "samples"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn make_toy_data(a: MakeToyData) -> Result<()> {
    let spec = ToySpec {
        seed: a.seed,
        n_samples: a.n,
        height: a.height,
        width: a.width,
        n_classes: a.classes,
        motion: a.frames.map(|frames| ToyMotion {
            frames,
            max_speed: a.max_speed,
        }),
    };
    let m = synth_toy_dataset(&a.out, a.split, &spec)?;
    println!("wrote {} samples to {}", a.n, m.split_dir().display());
    Ok(())
}

/// Merges config file and flag overrides into a validated config.
pub fn resolve_train_config(a: &Train) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { c.$($field).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        warmup_epochs => warmup_epochs,
        batch_size => batch_size,
        seed => seed,
        scales => discriminator_scales,
        lr => optimizer.lr,
        lambda1 => loss_weights.lambda1,
        lambda2 => loss_weights.lambda2,
        lambda3 => loss_weights.lambda3,
        alpha => alpha,
    );
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    c.validate()?;
    Ok(c)
}

fn open_dataset(
    root: &Path,
    split: Split,
    height: usize,
    width: usize,
    n_classes: usize,
) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::open(root, split)?;
    if m.n_classes > n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model was configured for {}",
            m.n_classes, n_classes
        )));
    }
    m.resolution = [height, width];
    Ok(m)
}

fn train(a: Train) -> Result<()> {
    let config = resolve_train_config(&a)?;
    let manifest = open_dataset(
        &a.data,
        a.split,
        config.height,
        config.width,
        config.n_classes,
    )?;
    let data = load_paired_dataset(&manifest, &config.laplacian)?;
    let run_dir = create_run_dir(&a.run)?;
    write_snapshot(&run_dir.join("config").join("train.toml"), &config)?;
    let out = train_cg2real(
        &config,
        &data,
        config.seed,
        TrainOptions {
            run_dir: Some(run_dir.clone()),
            ..Default::default()
        },
    )?;
    println!(
        "trained {} steps; checkpoint {}",
        out.log.len(),
        run_dir.join("checkpoints").join("latest").display()
    );
    Ok(())
}

fn load_models(checkpoint: &Path) -> Result<TrainedModels> {
    TrainedModels::load(checkpoint, &candle_core::Device::Cpu)
}

#[derive(Serialize)]
struct VideoSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: Split,
    seed: u64,
    video: &'a VideoConfig,
}

fn video_finetune(a: VideoFinetune) -> Result<()> {
    let mut cfg: VideoConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => VideoConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(w) = a.flow_weight {
        cfg.flow_weight = w;
    }
    cfg.validate()?;
    let models = load_models(&a.checkpoint)?;
    let mc = &models.config;
    let manifest = open_dataset(&a.data, a.split, mc.height, mc.width, mc.n_classes)?;
    let samples = load_paired_dataset(&manifest, &mc.laplacian)?;
    let sequences = group_sequences(&samples)
        .into_iter()
        .map(SequenceSample::new)
        .collect::<Result<Vec<_>>>()?;
    let run_dir = create_run_dir(&a.run)?;
    write_snapshot(
        &run_dir.join("config").join("video.toml"),
        &VideoSnapshot {
            checkpoint: &a.checkpoint,
            data: &a.data,
            split: a.split,
            seed: a.seed,
            video: &cfg,
        },
    )?;
    let out = finetune_video(
        models,
        &sequences,
        &cfg,
        a.seed,
        VideoOptions {
            run_dir: Some(run_dir.clone()),
        },
    )?;
    println!("fine-tuned {} steps", out.log.len());
    Ok(())
}

#[derive(Serialize)]
struct GenerateSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: Split,
    /// Only an explicit `--out`; the default lives inside the run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<&'a Path>,
    edge_samples: usize,
    alpha: f64,
    edges: &'a str,
    seed: u64,
}

fn generate(a: Generate) -> Result<()> {
    if a.edge_samples == 0 {
        return Err(Error::Config("--edge-samples must be >= 1".into()));
    }
    let models = load_models(&a.checkpoint)?;
    let alpha = a.alpha.unwrap_or(models.config.alpha);
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("--alpha must be > 0, got {alpha}")));
    }
    let mc = &models.config;
    let manifest = open_dataset(&a.data, a.split, mc.height, mc.width, mc.n_classes)?;
    let samples = load_paired_dataset(&manifest, &mc.laplacian)?;
    let run_dir = create_run_dir(&a.run)?;
    let out = a.out.clone().unwrap_or_else(|| run_dir.join("samples"));
    let use_dned = match a.edges {
        EdgeMode::Auto => models.phase == Phase::Joint || a.edge_samples > 1,
        EdgeMode::Laplacian => false,
        EdgeMode::Dned => true,
    };
    write_snapshot(
        &run_dir.join("config").join("generate.toml"),
        &GenerateSnapshot {
            checkpoint: &a.checkpoint,
            data: &a.data,
            split: a.split,
            out: a.out.as_deref(),
            edge_samples: a.edge_samples,
            alpha,
            edges: if use_dned { "dned" } else { "laplacian" },
            seed: a.seed,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for s in &samples {
        for k in 0..a.edge_samples {
            let mode = if !use_dned {
                EdgeSource::Laplacian
            } else if a.edge_samples == 1 {
                EdgeSource::Dned(EnsembleWeights::uniform())
            } else {
                EdgeSource::Dned(sample_ensemble_weights_with(alpha, &mut rng)?)
            };
            let stem = if a.edge_samples == 1 {
                s.name.clone()
            } else {
                format!("{}_v{k}", s.name)
            };
            let edges = models.edges_for(&s.image, &mode)?;
            let img = models.generate_with_edges(&s.semantic, &edges)?;
            write_rgb_png(&out.join(format!("{stem}.png")), &img)?;
            if a.dump_edges {
                write_edge_png(&out.join(format!("{stem}_edges.png")), &edges)?;
            }
        }
    }
    println!(
        "generated {} images in {}",
        samples.len() * a.edge_samples,
        out.display()
    );
    Ok(())
}

fn read_image_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    list_png_stems(dir)?
        .into_iter()
        .map(|n| Ok((n.clone(), read_rgb_png(&dir.join(format!("{n}.png")))?)))
        .collect()
}

fn eval(a: Eval) -> Result<()> {
    let emb = embedder_by_name(&a.embedder)?;
    let real = read_image_dir(&a.real)?;
    let fake = read_image_dir(&a.fake)?;
    let images = |v: &[(String, ImageTensor)]| v.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>();
    let fid_v = fid(&images(&real), &images(&fake), emb.as_ref())?;
    let clips = |v: &[(String, ImageTensor)]| -> Vec<Vec<ImageTensor>> {
        let mut map: std::collections::BTreeMap<&str, Vec<ImageTensor>> = Default::default();
        for (n, i) in v {
            if let Some((clip, _)) = n.split_once('/') {
                map.entry(clip).or_default().push(i.clone());
            }
        }
        map.into_values().collect()
    };
    let (rc, fc) = (clips(&real), clips(&fake));
    let fvd_v = if rc.len() >= 2 && fc.len() >= 2 {
        Some(fvd(&rc, &fc, emb.as_ref())?)
    } else {
        None
    };
    let seg = match (&a.gt_labels, &a.pred_labels) {
        (Some(gt), Some(pred)) => {
            let mut cm = ConfusionMatrix::new(a.classes);
            for n in list_png_stems(gt)? {
                let t: SemanticMap = read_label_png(&gt.join(format!("{n}.png")), a.classes)?;
                let p = read_label_png(&pred.join(format!("{n}.png")), a.classes)?;
                cm.accumulate(&t, &p)?;
            }
            Some(segmentation_scores(&cm)?)
        }
        _ => None,
    };
    let report = MetricsReport {
        fid: Some(fid_v),
        fvd: fvd_v,
        pixel_accuracy: seg.as_ref().map(|s| s.pixel_accuracy),
        mean_iou: seg.as_ref().map(|s| s.mean_iou),
        per_class_iou: seg.map(|s| s.per_class_iou).unwrap_or_default(),
        embedder_name: emb.name().to_string(),
        n_samples: fake.len(),
    };
    let out = match a.out {
        Some(p) => p,
        None => create_run_dir(&a.run)?.join("logs").join("metrics.json"),
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
    println!("{text}");
    Ok(())
}

fn colorize(map: &SemanticMap, palette: &[[u8; 3]]) -> Result<ImageTensor> {
    let hw = map.height() * map.width();
    let mut data = vec![0f32; 3 * hw];
    for (i, &l) in map.labels().iter().enumerate() {
        let c = palette.get(l as usize).copied().unwrap_or([0, 0, 0]);
        for k in 0..3 {
            data[k * hw + i] = c[k] as f32 / 127.5 - 1.0;
        }
    }
    ImageTensor::new(3, map.height(), map.width(), data)
}

/// Concatenates equally sized RGB panels left to right.
pub fn montage(panels: &[ImageTensor]) -> Result<ImageTensor> {
    let (h, w) = (panels[0].height(), panels[0].width());
    let n = panels.len();
    let mut data = vec![0f32; 3 * h * w * n];
    for (p, img) in panels.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != 3 {
            return Err(Error::Validation("montage panels differ in shape".into()));
        }
        for c in 0..3 {
            for y in 0..h {
                let dst = c * h * w * n + y * w * n + p * w;
                data[dst..dst + w].copy_from_slice(&img.plane(c)[y * w..(y + 1) * w]);
            }
        }
    }
    ImageTensor::new(3, h, w * n, data)
}

fn grid(a: Grid) -> Result<()> {
    let models = a.checkpoint.as_deref().map(load_models).transpose()?;
    let mut manifest = DatasetManifest::open(&a.data, a.split)?;
    if let Some(m) = &models {
        manifest.resolution = [m.config.height, m.config.width];
    }
    let lap = models
        .as_ref()
        .map(|m| m.config.laplacian)
        .unwrap_or_default();
    let samples = load_paired_dataset(&manifest, &lap)?;
    let out = match a.out {
        Some(p) => p,
        None => create_run_dir(&a.run)?.join("samples"),
    };
    for s in &samples {
        let fake_path = a.fake.join(format!("{}.png", s.name));
        let fake = crate::datakit::resize_image(
            &read_rgb_png(&fake_path)?,
            s.image.height(),
            s.image.width(),
        )?;
        let edges = match &models {
            Some(m) => m.edges_for(&s.image, &EdgeSource::Dned(EnsembleWeights::uniform()))?,
            None => s.source_edge.clone(),
        };
        let e = edges.to_image();
        let edge_rgb = ImageTensor::new(3, e.height(), e.width(), e.data().repeat(3))?;
        let panel = montage(&[
            colorize(&s.semantic, &manifest.palette)?,
            edge_rgb,
            fake,
            s.image.clone(),
        ])?;
        write_rgb_png(&out.join(format!("{}.png", s.name)), &panel)?;
    }
    println!("wrote {} montages to {}", samples.len(), out.display());
    Ok(())
}

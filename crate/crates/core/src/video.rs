//! Temporal consistency: flow loss and video fine-tuning of a pretrained
//! image model. Frames are always generated independently; the same
//! generator weights produce frame `t` and frame `t+1`.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::PairedSample;
use crate::error::{ensure, Error, Result};
use crate::flow::{estimate_flow_tensor, gray_tensor, mean_abs_flow_diff, FlowConfig};
use crate::nn::scalar;
use crate::synthesis::losses::cg2real_objective;
use crate::synthesis::train::{finite, Batch, LossLog, Trainer};
use crate::synthesis::{EdgeSource, TrainedModels};
use crate::tensor::{ImageTensor, SemanticMap};

/// Temporally contiguous frames of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    frames: Vec<PairedSample>,
}

impl SequenceSample {
    pub fn new(frames: Vec<PairedSample>) -> Result<Self> {
        ensure!(
            frames.len() >= 2,
            "a sequence needs at least 2 frames, got {}",
            frames.len()
        );
        let first = &frames[0];
        for f in &frames[1..] {
            ensure!(
                f.image.same_shape(&first.image)
                    && f.semantic.height() == first.semantic.height()
                    && f.semantic.width() == first.semantic.width(),
                "frame {} differs in shape from frame {}",
                f.name,
                first.name
            );
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[PairedSample] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Flow loss on `N×3×H×W` tensors. The real-pair flow carries no gradient;
/// the fake-pair flow is differentiable through the estimator iterations.
pub fn flow_loss_tensor(
    x_t: &Tensor,
    x_t1: &Tensor,
    f_t: &Tensor,
    f_t1: &Tensor,
    cfg: &FlowConfig,
) -> Result<Tensor> {
    ensure!(
        x_t.dims() == x_t1.dims() && x_t.dims() == f_t.dims() && x_t.dims() == f_t1.dims(),
        "flow loss frames are not aligned: {:?} {:?} {:?} {:?}",
        x_t.dims(),
        x_t1.dims(),
        f_t.dims(),
        f_t1.dims()
    );
    let real = estimate_flow_tensor(
        &gray_tensor(&x_t.detach())?,
        &gray_tensor(&x_t1.detach())?,
        cfg,
    )?
    .detach();
    let fake = estimate_flow_tensor(&gray_tensor(f_t)?, &gray_tensor(f_t1)?, cfg)?;
    mean_abs_flow_diff(&fake, &real)
}

pub fn flow_loss(
    x_t: &ImageTensor,
    x_t1: &ImageTensor,
    f_t: &ImageTensor,
    f_t1: &ImageTensor,
    cfg: &FlowConfig,
) -> Result<f64> {
    ensure!(
        x_t.same_shape(x_t1) && x_t.same_shape(f_t) && x_t.same_shape(f_t1),
        "flow loss frames are not aligned"
    );
    let dev = Device::Cpu;
    let t = |i: &ImageTensor| i.to_tensor(DType::F32, &dev);
    scalar(&flow_loss_tensor(
        &t(x_t)?,
        &t(x_t1)?,
        &t(f_t)?,
        &t(f_t1)?,
        cfg,
    )?)
}

/// `image_total + flow_weight · flow`.
pub fn video_objective(cg2real_total: &Tensor, flow: &Tensor, flow_weight: f64) -> Result<Tensor> {
    Ok((cg2real_total + (flow * flow_weight)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub flow: FlowConfig,
    pub flow_weight: f64,
    /// Generator updates, one consecutive pair each.
    pub steps: usize,
    pub checkpoint_every: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            flow_weight: 1.0,
            steps: 100,
            checkpoint_every: 50,
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.flow_weight >= 0.0 && self.flow_weight.is_finite()) {
            return Err(Error::Config("flow_weight must be >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoStepRecord {
    pub step: usize,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G_adv")]
    pub loss_g_adv: f64,
    pub fm: f64,
    pub percep: f64,
    pub dned: f64,
    pub flow: f64,
    pub total: f64,
}

#[derive(Default)]
pub struct VideoOptions {
    /// Receives `checkpoints/` and `logs/video_loss.csv`.
    pub run_dir: Option<PathBuf>,
}

pub struct VideoOutcome {
    pub models: TrainedModels,
    pub log: Vec<VideoStepRecord>,
}

/// Fine-tunes a pretrained model on consecutive-frame pairs sampled
/// uniformly from `sequences`. Deterministic given `seed`.
pub fn finetune_video(
    models: TrainedModels,
    sequences: &[SequenceSample],
    cfg: &VideoConfig,
    seed: u64,
    opts: VideoOptions,
) -> Result<VideoOutcome> {
    cfg.validate()?;
    ensure!(!sequences.is_empty(), "no sequences to fine-tune on");
    let phase = models.phase;
    let tcfg = models.config.clone();
    let device = models.device().clone();
    let mut trainer = Trainer::new(models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ckpt = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
    let mut csv = LossLog::create(
        opts.run_dir
            .as_ref()
            .map(|d| d.join("logs").join("video_loss.csv")),
    )?;
    let mut log = Vec::with_capacity(cfg.steps);
    let start = trainer.models.step;

    for k in 1..=cfg.steps {
        let step = start + k;
        let seq = &sequences[rng.random_range(0..sequences.len())];
        let t = rng.random_range(0..seq.len() - 1);
        let a = Batch::from_samples(std::slice::from_ref(&seq.frames[t]), &tcfg, &device)?;
        let b = Batch::from_samples(std::slice::from_ref(&seq.frames[t + 1]), &tcfg, &device)?;
        // Shared weights, independent calls: frame t+1 never sees frame t.
        let ga = trainer.generate(&a, phase)?;
        let gb = trainer.generate(&b, phase)?;

        let sem = Tensor::cat(&[&a.semantic, &b.semantic], 0)?;
        let real = Tensor::cat(&[&a.real, &b.real], 0)?;
        let fake = Tensor::cat(&[&ga.fake, &gb.fake], 0)?;
        let loss_d = trainer.discriminator_step(&sem, &real, &fake, step)?;

        let dned = match (&ga.side_probs, &gb.side_probs) {
            (Some(pa), Some(pb)) => {
                let probs = pa
                    .iter()
                    .zip(pb)
                    .map(|(x, y)| Tensor::cat(&[x, y], 0))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                trainer.dned_term(&probs, &Tensor::cat(&[&a.laplacian, &b.laplacian], 0)?)?
            }
            _ => Tensor::new(0f32, &device)?,
        };
        let parts = trainer.generator_parts(&sem, &real, &fake, dned)?;
        let image_total = cg2real_objective(&parts, &tcfg.loss_weights, step)?;
        let flow = flow_loss_tensor(&a.real, &b.real, &ga.fake, &gb.fake, &cfg.flow)?;
        let flow_v = finite(scalar(&flow)?, "flow", step)?;
        let total = video_objective(&image_total, &flow, cfg.flow_weight)?;
        let record = VideoStepRecord {
            step,
            loss_d,
            loss_g_adv: scalar(&parts.adversarial)?,
            fm: scalar(&parts.feature_matching)?,
            percep: scalar(&parts.perceptual)?,
            dned: scalar(&parts.dned)?,
            flow: flow_v,
            total: finite(scalar(&total)?, "total", step)?,
        };
        trainer.generator_step(&total, ga.side_probs.is_some())?;
        trainer.models.step = step;
        csv.push(&record)?;
        log.push(record);
        if let Some(dir) = &ckpt {
            if k % cfg.checkpoint_every == 0 {
                trainer.models.save(&dir.join("latest"))?;
            }
        }
    }
    if let Some(dir) = &ckpt {
        trainer.models.save(&dir.join("latest"))?;
    }
    Ok(VideoOutcome {
        models: trainer.models,
        log,
    })
}

/// Generates every frame independently; output `i` depends only on input `i`.
pub fn generate_sequence(
    models: &TrainedModels,
    frames: &[(SemanticMap, ImageTensor)],
    mode: &EdgeSource,
) -> Result<Vec<ImageTensor>> {
    frames
        .iter()
        .map(|(s, src)| models.generate(s, src, mode))
        .collect()
}

/// Mean flow loss over every consecutive pair of every sequence, using the
/// model's current conditioning.
pub fn mean_flow_loss(
    models: &TrainedModels,
    sequences: &[SequenceSample],
    cfg: &FlowConfig,
) -> Result<f64> {
    let mode = EdgeSource::for_phase(models.phase);
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in sequences {
        let inputs: Vec<_> = seq
            .frames
            .iter()
            .map(|f| (f.semantic.clone(), f.image.clone()))
            .collect();
        let fakes = generate_sequence(models, &inputs, &mode)?;
        for t in 0..seq.len() - 1 {
            total += flow_loss(
                &seq.frames[t].image,
                &seq.frames[t + 1].image,
                &fakes[t],
                &fakes[t + 1],
                cfg,
            )?;
            n += 1;
        }
    }
    ensure!(n > 0, "no frame pairs");
    Ok(total / n as f64)
}

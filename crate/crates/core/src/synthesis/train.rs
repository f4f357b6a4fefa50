//! Two-phase training of the conditional generator.
//!
//! Phase A (warm-up epochs): the generator is conditioned on the binary
//! Laplacian edges of the real image while the edge detector is fitted
//! separately to those same edges. Phase B: the generator is conditioned on
//! the detector's ensemble output and both are optimised jointly under the
//! full objective.

use std::fs::File;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::AdamW;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig, MultiScaleDiscriminator};
use super::generator::{Generator, GeneratorConfig};
use super::losses::{
    cg2real_objective, discriminator_loss_from, feature_matching_from,
    generator_adversarial_loss_from, perceptual_loss, LossParts, LossWeights,
};
use super::perceptual::{PerceptualExtractor, PerceptualSource};
use crate::datakit::PairedSample;
use crate::dned::{
    dned_loss_tensor, ensemble_tensor, prepare_input, DnedConfig, DnedInput, DnedNetwork,
    EnsembleWeights,
};
use crate::edges::{laplacian_edge_map, LaplacianConfig};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, scalar, AdamConfig};
use crate::tensor::{one_hot_semantic, EdgeMap, ImageTensor, SemanticMap, SemanticTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub base_width: usize,
    pub n_down: usize,
    pub n_res: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            base_width: 32,
            n_down: 3,
            n_res: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub base_width: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        Self {
            base_width: 32,
            n_layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Random crop `[height, width]`; must be compatible with the networks.
    pub crop: Option<[usize; 2]>,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Number of discriminator scales (`l_m`).
    pub discriminator_scales: usize,
    pub loss_weights: LossWeights,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many generator steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Dirichlet concentration for test-time edge diversity.
    pub alpha: f64,
    /// Keep the detector fixed during the joint phase.
    pub freeze_dned: bool,
    pub checkpoint_every: usize,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    pub dned: DnedConfig,
    pub laplacian: LaplacianConfig,
    pub perceptual: PerceptualSource,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            n_classes: 6,
            discriminator_scales: 1,
            loss_weights: LossWeights::default(),
            warmup_epochs: 1,
            epochs: 2,
            batch_size: 1,
            max_steps: None,
            optimizer: AdamConfig::default(),
            seed: 0,
            alpha: 3.0,
            freeze_dned: false,
            checkpoint_every: 100,
            generator: GeneratorSection::default(),
            discriminator: DiscriminatorSection::default(),
            dned: DnedConfig::default(),
            laplacian: LaplacianConfig::default(),
            perceptual: PerceptualSource::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the procedural 64×128 dataset: a slimmer
    /// generator, ten warm-up epochs and a 200-step budget.
    pub fn toy() -> Self {
        Self {
            warmup_epochs: 10,
            epochs: 25,
            max_steps: Some(200),
            generator: GeneratorSection {
                base_width: 16,
                n_down: 3,
                n_res: 3,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return cfg(format!(
                "resolution {}x{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if self.generator.n_down > 5 {
            return cfg("generator.n_down must be <= 5".into());
        }
        if self.n_classes == 0 {
            return cfg("n_classes must be >= 1".into());
        }
        if !matches!(self.discriminator_scales, 1..=4) {
            return cfg(format!(
                "discriminator_scales must be in 1..=4, got {}",
                self.discriminator_scales
            ));
        }
        if self.epochs == 0 {
            return cfg("epochs must be >= 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return cfg(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return cfg("optimizer.lr must be > 0".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return cfg("alpha must be > 0".into());
        }
        if self.checkpoint_every == 0 {
            return cfg("checkpoint_every must be >= 1".into());
        }
        if let Some([h, w]) = self.augment.crop {
            if h == 0 || w == 0 || h > self.height || w > self.width || h % 32 != 0 || w % 32 != 0 {
                return cfg(format!(
                    "augment.crop {h}x{w} must be a multiple of 32 within the resolution"
                ));
            }
        }
        self.loss_weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.laplacian
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_classes: self.n_classes,
            base_width: self.generator.base_width,
            n_down: self.generator.n_down,
            n_res: self.generator.n_res,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n_classes: self.n_classes,
            scales: self.discriminator_scales,
            base_width: self.discriminator.base_width,
            n_layers: self.discriminator.n_layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Generator conditioned on Laplacian edges.
    Warmup,
    /// Generator conditioned on the detector ensemble.
    Joint,
}

/// Where the generator's edge conditioning comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeSource {
    Laplacian,
    Dned(EnsembleWeights),
}

impl EdgeSource {
    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Warmup => EdgeSource::Laplacian,
            Phase::Joint => EdgeSource::Dned(EnsembleWeights::uniform()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub config: TrainConfig,
}

/// Generator, discriminator and edge detector of one run.
pub struct TrainedModels {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: MultiScaleDiscriminator,
    pub dned: DnedNetwork,
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
}

impl TrainedModels {
    /// Fresh, seed-initialised networks.
    pub fn init(config: &TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        Ok(Self {
            generator: Generator::new(config.generator_config(), seed, DType::F32, device)?,
            discriminator: MultiScaleDiscriminator::new(
                config.discriminator_config(),
                seed.wrapping_add(1),
                DType::F32,
                device,
            )?,
            dned: DnedNetwork::new(
                config.dned.clone(),
                seed.wrapping_add(2),
                DType::F32,
                device,
            )?,
            config: config.clone(),
            step: 0,
            epoch: 0,
            phase: if config.warmup_epochs > 0 {
                Phase::Warmup
            } else {
                Phase::Joint
            },
        })
    }

    pub fn device(&self) -> &Device {
        self.generator.params().device()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator
            .params()
            .save(&dir.join("generator.safetensors"))?;
        self.discriminator
            .params()
            .save(&dir.join("discriminator.safetensors"))?;
        self.dned.save(
            &dir.join("dned"),
            [self.config.height, self.config.width],
            self.step,
        )?;
        let manifest = CheckpointManifest {
            step: self.step,
            epoch: self.epoch,
            phase: self.phase,
            config: self.config.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut models = Self::init(&manifest.config, device)?;
        models
            .generator
            .params()
            .load(&dir.join("generator.safetensors"))?;
        models
            .discriminator
            .params()
            .load(&dir.join("discriminator.safetensors"))?;
        models
            .dned
            .params()
            .load(&dir.join("dned").join("dned.safetensors"))?;
        models.step = manifest.step;
        models.epoch = manifest.epoch;
        models.phase = manifest.phase;
        Ok(models)
    }

    /// Edge conditioning for one source image.
    pub fn edges_for(&self, source: &ImageTensor, mode: &EdgeSource) -> Result<EdgeMap> {
        let lap = laplacian_edge_map(source, &self.config.laplacian)?;
        match mode {
            EdgeSource::Laplacian => Ok(lap),
            EdgeSource::Dned(w) => {
                let input =
                    detector_input(self.config.dned.input, source, &lap, &self.config.laplacian)?;
                let x = input.to_tensor(DType::F32, self.device())?;
                let probs = self.dned.forward_probs(&x)?;
                EdgeMap::from_tensor(&ensemble_tensor(&probs, w)?)
            }
        }
    }

    pub fn generate_with_edges(
        &self,
        semantic: &SemanticMap,
        edges: &EdgeMap,
    ) -> Result<ImageTensor> {
        let s = one_hot_semantic(semantic, self.config.n_classes)?;
        super::generator::generator_forward(&self.generator, &s, edges)
    }

    /// Runs the full test-time pipeline on one input.
    pub fn generate(
        &self,
        semantic: &SemanticMap,
        source: &ImageTensor,
        mode: &EdgeSource,
    ) -> Result<ImageTensor> {
        let edges = self.edges_for(source, mode)?;
        self.generate_with_edges(semantic, &edges)
    }
}

fn detector_input(
    mode: DnedInput,
    image: &ImageTensor,
    lap: &EdgeMap,
    cfg: &LaplacianConfig,
) -> Result<ImageTensor> {
    match mode {
        DnedInput::EdgeMap => Ok(lap.to_image()),
        other => prepare_input(other, image, cfg),
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G_adv")]
    pub loss_g_adv: f64,
    pub fm: f64,
    pub percep: f64,
    pub dned: f64,
    pub total: f64,
}

/// Stacked tensors of one mini-batch.
pub(crate) struct Batch {
    pub semantic: Tensor,
    pub real: Tensor,
    /// Binary Laplacian edges of the real image (phase A input, detector target).
    pub laplacian: Tensor,
    pub detector_input: Tensor,
}

impl Batch {
    pub fn from_samples(
        samples: &[PairedSample],
        cfg: &TrainConfig,
        device: &Device,
    ) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let sems = samples
            .iter()
            .map(|s| one_hot_semantic(&s.semantic, cfg.n_classes))
            .collect::<Result<Vec<SemanticTensor>>>()?;
        let det = samples
            .iter()
            .map(|s| detector_input(cfg.dned.input, &s.image, &s.source_edge, &cfg.laplacian))
            .collect::<Result<Vec<_>>>()?;
        let dt = DType::F32;
        Ok(Self {
            semantic: SemanticTensor::stack(&sems.iter().collect::<Vec<_>>(), dt, device)?,
            real: ImageTensor::stack(
                &samples.iter().map(|s| &s.image).collect::<Vec<_>>(),
                dt,
                device,
            )?,
            laplacian: EdgeMap::stack(
                &samples.iter().map(|s| &s.source_edge).collect::<Vec<_>>(),
                dt,
                device,
            )?,
            detector_input: ImageTensor::stack(&det.iter().collect::<Vec<_>>(), dt, device)?,
        })
    }
}

/// Output of the generator for one batch plus the detector side outputs
/// that produced its conditioning (joint phase only).
pub(crate) struct Generated {
    pub fake: Tensor,
    pub side_probs: Option<Vec<Tensor>>,
}

/// Networks plus optimizer state; shared by image training and video
/// fine-tuning.
pub(crate) struct Trainer {
    pub models: TrainedModels,
    pub perceptual: PerceptualExtractor,
    opt_g: AdamW,
    opt_d: AdamW,
    opt_dned: AdamW,
}

impl Trainer {
    pub fn new(models: TrainedModels) -> Result<Self> {
        let cfg = &models.config;
        let dev = models.device().clone();
        let perceptual = PerceptualExtractor::from_source(&cfg.perceptual, DType::F32, &dev)?;
        let opt_g = nn::adam(models.generator.params().vars(), &cfg.optimizer)?;
        let opt_d = nn::adam(models.discriminator.params().vars(), &cfg.optimizer)?;
        let opt_dned = nn::adam(models.dned.params().vars(), &cfg.optimizer)?;
        Ok(Self {
            models,
            perceptual,
            opt_g,
            opt_d,
            opt_dned,
        })
    }

    pub fn generate(&self, batch: &Batch, phase: Phase) -> Result<Generated> {
        let m = &self.models;
        match phase {
            Phase::Warmup => Ok(Generated {
                fake: m.generator.forward(&batch.semantic, &batch.laplacian)?,
                side_probs: None,
            }),
            Phase::Joint => {
                let mut probs = m.dned.forward_probs(&batch.detector_input)?;
                if m.config.freeze_dned {
                    probs = probs.iter().map(|p| p.detach()).collect();
                }
                let edges = ensemble_tensor(&probs, &EnsembleWeights::uniform())?;
                Ok(Generated {
                    fake: m.generator.forward(&batch.semantic, &edges)?,
                    side_probs: Some(probs),
                })
            }
        }
    }

    /// One discriminator update; `fake` is detached here.
    pub fn discriminator_step(
        &mut self,
        semantic: &Tensor,
        real: &Tensor,
        fake: &Tensor,
        step: usize,
    ) -> Result<f64> {
        let d = &self.models.discriminator;
        let loss = discriminator_loss_from(
            &d.forward(semantic, real)?,
            &d.forward(semantic, &fake.detach())?,
        )?;
        let v = finite(scalar(&loss)?, "loss_D", step)?;
        let grads = nn::backward(&loss)?;
        nn::step(&mut self.opt_d, &grads)?;
        Ok(v)
    }

    /// Adversarial, feature-matching and perceptual terms for the generator.
    pub fn generator_parts(
        &self,
        semantic: &Tensor,
        real: &Tensor,
        fake: &Tensor,
        dned: Tensor,
    ) -> Result<LossParts> {
        let d = &self.models.discriminator;
        let real_out = d.forward(semantic, real)?;
        let fake_out = d.forward(semantic, fake)?;
        Ok(LossParts {
            adversarial: generator_adversarial_loss_from(&fake_out)?,
            feature_matching: feature_matching_from(&real_out, &fake_out)?,
            perceptual: perceptual_loss(&self.perceptual, real, fake)?,
            dned,
        })
    }

    /// Detector loss against the Laplacian target with training weights.
    pub fn dned_term(&self, probs: &[Tensor], target: &Tensor) -> Result<Tensor> {
        dned_loss_tensor(
            probs,
            target,
            &EnsembleWeights::uniform(),
            self.models.config.dned.class_balanced,
        )
    }

    /// Separate detector update used during warm-up.
    pub fn dned_step(&mut self, batch: &Batch, step: usize) -> Result<f64> {
        let probs = self.models.dned.forward_probs(&batch.detector_input)?;
        let loss = self.dned_term(&probs, &batch.laplacian)?;
        let v = finite(scalar(&loss)?, "dned", step)?;
        let grads = nn::backward(&loss)?;
        nn::step(&mut self.opt_dned, &grads)?;
        Ok(v)
    }

    /// Backpropagates the generator objective and updates the generator
    /// (and the detector when it is trained jointly).
    pub fn generator_step(&mut self, total: &Tensor, joint: bool) -> Result<()> {
        let grads = nn::backward(total)?;
        nn::step(&mut self.opt_g, &grads)?;
        if joint && !self.models.config.freeze_dned {
            nn::step(&mut self.opt_dned, &grads)?;
        }
        Ok(())
    }

    /// Full image step: D update, then G (and detector) update.
    pub fn image_step(&mut self, batch: &Batch, phase: Phase, step: usize) -> Result<StepRecord> {
        let gen = self.generate(batch, phase)?;
        let loss_d = self.discriminator_step(&batch.semantic, &batch.real, &gen.fake, step)?;
        let (dned_part, separate) = match &gen.side_probs {
            Some(probs) => (self.dned_term(probs, &batch.laplacian)?, None),
            None => {
                let v = self.dned_step(batch, step)?;
                (Tensor::new(v as f32, self.models.device())?, Some(v))
            }
        };
        let parts = self.generator_parts(&batch.semantic, &batch.real, &gen.fake, dned_part)?;
        let total = cg2real_objective(&parts, &self.models.config.loss_weights, step)?;
        let record = StepRecord {
            step,
            loss_d,
            loss_g_adv: scalar(&parts.adversarial)?,
            fm: scalar(&parts.feature_matching)?,
            percep: scalar(&parts.perceptual)?,
            dned: separate.map_or_else(|| scalar(&parts.dned), Ok)?,
            total: finite(scalar(&total)?, "total", step)?,
        };
        self.generator_step(&total, phase == Phase::Joint)?;
        Ok(record)
    }
}

pub(crate) fn finite(v: f64, part: &'static str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            part,
            value: v,
        })
    }
}

/// Per-step callback: receives the logged losses and the current models.
pub type StepHook<'a> = dyn FnMut(&StepRecord, &TrainedModels) -> Result<()> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `checkpoints/` and `logs/loss.csv`.
    pub run_dir: Option<PathBuf>,
    pub hook: Option<&'a mut StepHook<'a>>,
    /// Start from these networks instead of a fresh initialisation.
    pub init: Option<TrainedModels>,
}

pub struct TrainOutcome {
    pub models: TrainedModels,
    pub log: Vec<StepRecord>,
}

/// CSV loss log with a fixed header.
pub(crate) struct LossLog {
    writer: Option<csv::Writer<File>>,
}

impl LossLog {
    pub fn create(path: Option<PathBuf>) -> Result<Self> {
        let writer = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                Some(csv::Writer::from_path(&p)?)
            }
            None => None,
        };
        Ok(Self { writer })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.serialize(row)?;
            w.flush().map_err(|e| Error::io("<loss log>", e))?;
        }
        Ok(())
    }
}

pub(crate) fn apply_augmentation(
    sample: &PairedSample,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    let mut s = sample.clone();
    if aug.flip && rng.random_bool(0.5) {
        s = s.flip_horizontal();
    }
    if let Some([h, w]) = aug.crop {
        let y0 = rng.random_range(0..=s.image.height() - h);
        let x0 = rng.random_range(0..=s.image.width() - w);
        s = s.crop(y0, x0, h, w)?;
    }
    Ok(s)
}

/// Trains the image model on `dataset`. Deterministic given `seed`.
pub fn train_cg2real(
    config: &TrainConfig,
    dataset: &[PairedSample],
    seed: u64,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.seed = seed;
    config.validate()?;
    ensure!(!dataset.is_empty(), "training dataset is empty");
    for s in dataset {
        ensure!(
            s.image.height() == config.height && s.image.width() == config.width,
            "sample {} is {}x{}, expected {}x{}",
            s.name,
            s.image.height(),
            s.image.width(),
            config.height,
            config.width
        );
        ensure!(
            s.semantic.n_classes() <= config.n_classes,
            "sample {} uses {} classes, model has {}",
            s.name,
            s.semantic.n_classes(),
            config.n_classes
        );
    }
    let device = Device::Cpu;
    let models = match opts.init.take() {
        Some(mut m) => {
            m.config = config.clone();
            m
        }
        None => TrainedModels::init(&config, &device)?,
    };
    let mut trainer = Trainer::new(models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let ckpt_dir = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
    let mut log_file = LossLog::create(
        opts.run_dir
            .as_ref()
            .map(|d| d.join("logs").join("loss.csv")),
    )?;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        let phase = if epoch < config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples = chunk
                .iter()
                .map(|&i| apply_augmentation(&dataset[i], &config.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_samples(&samples, &config, &device)?;
            step += 1;
            let record = trainer.image_step(&batch, phase, step)?;
            trainer.models.step = step;
            trainer.models.epoch = epoch;
            trainer.models.phase = phase;
            log_file.push(&record)?;
            log.push(record);
            if let Some(hook) = opts.hook.as_mut() {
                hook(&record, &trainer.models)?;
            }
            if let Some(dir) = &ckpt_dir {
                if step.is_multiple_of(config.checkpoint_every) {
                    trainer.models.save(&dir.join("latest"))?;
                }
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        trainer.models.save(&dir.join("latest"))?;
    }
    Ok(TrainOutcome {
        models: trainer.models,
        log,
    })
}

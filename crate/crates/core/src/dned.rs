//! Deep neural edge detector: a six-stage convolutional pyramid whose
//! per-stage side outputs are upsampled to full resolution and combined by
//! convex ensemble weights.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::edges::{laplacian_edge_map, to_grayscale, LaplacianConfig};
use crate::error::{ensure, Error, Result};
use crate::nn::{resize, sigmoid, Conv2d, ConvSpec, Init, Params, Resample};
use crate::tensor::{EdgeMap, ImageTensor};

/// Number of side outputs.
pub const N_SIDES: usize = 6;

/// Probability clamp used inside the binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// What the detector looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DnedInput {
    /// The binary Laplacian edge map of the source image.
    #[default]
    EdgeMap,
    /// The luma of the source image.
    Gray,
    /// The RGB source image.
    Rgb,
}

impl DnedInput {
    pub fn channels(self) -> usize {
        match self {
            DnedInput::Rgb => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnedConfig {
    pub stage_widths: [usize; N_SIDES],
    pub input: DnedInput,
    /// Weight positives by the negative fraction (and vice versa) in the BCE.
    pub class_balanced: bool,
}

impl Default for DnedConfig {
    fn default() -> Self {
        Self {
            stage_widths: [16, 32, 64, 128, 256, 256],
            input: DnedInput::EdgeMap,
            class_balanced: false,
        }
    }
}

/// Convex combination coefficients over the six side outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights([f64; N_SIDES]);

impl EnsembleWeights {
    pub fn new(weights: [f64; N_SIDES]) -> Result<Self> {
        ensure!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "ensemble weights must be finite and non-negative"
        );
        let sum: f64 = weights.iter().sum();
        ensure!(
            (sum - 1.0).abs() <= 1e-6,
            "ensemble weights sum to {sum}, expected 1"
        );
        Ok(Self(weights))
    }

    pub fn uniform() -> Self {
        Self([1.0 / N_SIDES as f64; N_SIDES])
    }

    pub fn one_hot(index: usize) -> Result<Self> {
        ensure!(index < N_SIDES, "side index {index} out of range");
        let mut w = [0.0; N_SIDES];
        w[index] = 1.0;
        Ok(Self(w))
    }

    pub fn as_array(&self) -> &[f64; N_SIDES] {
        &self.0
    }
}

/// Draws weights from a symmetric Dirichlet distribution.
pub fn sample_ensemble_weights(alpha: f64, seed: u64) -> Result<EnsembleWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_ensemble_weights_with(alpha, &mut rng)
}

pub fn sample_ensemble_weights_with(alpha: f64, rng: &mut ChaCha8Rng) -> Result<EnsembleWeights> {
    ensure!(
        alpha.is_finite() && alpha > 0.0,
        "dirichlet alpha must be > 0, got {alpha}"
    );
    let dist = Dirichlet::new([alpha; N_SIDES])
        .map_err(|e| Error::Validation(format!("dirichlet: {e}")))?;
    let draw = dist.sample(rng);
    Ok(EnsembleWeights(draw))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DnedManifest {
    pub stage_widths: [usize; N_SIDES],
    pub input: DnedInput,
    pub input_size: [usize; 2],
    pub training_step: usize,
}

pub struct DnedNetwork {
    config: DnedConfig,
    params: Params,
    stages: Vec<[Conv2d; 2]>,
    heads: Vec<Conv2d>,
}

impl DnedNetwork {
    pub fn new(config: DnedConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        ensure!(
            config.stage_widths.iter().all(|&w| w > 0),
            "stage widths must be positive"
        );
        let mut p = Params::new(seed, dtype, device);
        let mut stages = Vec::with_capacity(N_SIDES);
        let mut heads = Vec::with_capacity(N_SIDES);
        let mut in_ch = config.input.channels();
        for (i, &width) in config.stage_widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let a = Conv2d::new(
                &mut p,
                &format!("stage{i}.conv0"),
                ConvSpec::new(in_ch, width, 3).stride(stride),
                Init::HeNormal,
            )?;
            let b = Conv2d::new(
                &mut p,
                &format!("stage{i}.conv1"),
                ConvSpec::new(width, width, 3),
                Init::HeNormal,
            )?;
            stages.push([a, b]);
            heads.push(Conv2d::new(
                &mut p,
                &format!("side{i}"),
                ConvSpec::new(width, 1, 1),
                Init::FanInUniform,
            )?);
            in_ch = width;
        }
        Ok(Self {
            config,
            params: p,
            stages,
            heads,
        })
    }

    pub fn config(&self) -> &DnedConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Side-output logits, each `N×1×H×W`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(
            c == self.config.input.channels(),
            "detector expects {} input channels, got {c}",
            self.config.input.channels()
        );
        ensure!(
            h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0,
            "detector input {h}x{w} must be divisible by 32"
        );
        let mut feats = x.clone();
        let mut out = Vec::with_capacity(N_SIDES);
        for (stage, head) in self.stages.iter().zip(&self.heads) {
            feats = stage[0].forward(&feats)?.relu()?;
            feats = stage[1].forward(&feats)?.relu()?;
            let side = head.forward(&feats)?;
            out.push(resize(&side, h, w, Resample::Bilinear)?);
        }
        Ok(out)
    }

    /// Side-output probabilities in `(0, 1)`.
    pub fn forward_probs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward_logits(x)?.iter().map(sigmoid).collect()
    }

    /// Builds the detector input for one source image.
    pub fn prepare_input(
        &self,
        img: &ImageTensor,
        laplacian: &LaplacianConfig,
    ) -> Result<ImageTensor> {
        prepare_input(self.config.input, img, laplacian)
    }

    pub fn save(&self, dir: &Path, input_size: [usize; 2], training_step: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("dned.safetensors"))?;
        let manifest = DnedManifest {
            stage_widths: self.config.stage_widths,
            input: self.config.input,
            input_size,
            training_step,
        };
        let path = dir.join("dned.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    /// Restores a detector saved by [`DnedNetwork::save`].
    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<(Self, DnedManifest)> {
        let path = dir.join("dned.json");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DnedManifest = serde_json::from_str(&text)?;
        let config = DnedConfig {
            stage_widths: manifest.stage_widths,
            input: manifest.input,
            class_balanced: false,
        };
        let net = Self::new(config, 0, dtype, device)?;
        net.params.load(&dir.join("dned.safetensors"))?;
        Ok((net, manifest))
    }
}

pub fn prepare_input(
    mode: DnedInput,
    img: &ImageTensor,
    laplacian: &LaplacianConfig,
) -> Result<ImageTensor> {
    match mode {
        DnedInput::EdgeMap => Ok(laplacian_edge_map(img, laplacian)?.to_image()),
        DnedInput::Gray => Ok(to_grayscale(img)),
        DnedInput::Rgb => {
            ensure!(
                img.channels() == 3,
                "rgb detector input needs a 3-channel image"
            );
            Ok(img.clone())
        }
    }
}

/// Runs the detector on one image and returns its six soft side outputs.
pub fn dned_forward(
    net: &DnedNetwork,
    img: &ImageTensor,
    laplacian: &LaplacianConfig,
) -> Result<Vec<EdgeMap>> {
    let input = net.prepare_input(img, laplacian)?;
    let x = input.to_tensor(net.params.dtype(), net.params.device())?;
    net.forward_probs(&x)?
        .iter()
        .map(EdgeMap::from_tensor)
        .collect()
}

/// Weighted sum of per-side binary cross entropies on probability tensors.
pub fn dned_loss_tensor(
    probs: &[Tensor],
    target: &Tensor,
    weights: &EnsembleWeights,
    class_balanced: bool,
) -> Result<Tensor> {
    ensure!(
        probs.len() == N_SIDES,
        "expected {N_SIDES} side outputs, got {}",
        probs.len()
    );
    for p in probs {
        ensure!(
            p.dims() == target.dims(),
            "side output {:?} does not match target {:?}",
            p.dims(),
            target.dims()
        );
    }
    let target = target.to_dtype(probs[0].dtype())?;
    let neg_target = target.affine(-1.0, 1.0)?;
    let (pos_w, neg_w) = if class_balanced {
        let n = target.elem_count() as f64;
        let pos = target.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let beta = (n - pos) / n;
        (beta, 1.0 - beta)
    } else {
        (1.0, 1.0)
    };
    let mut total: Option<Tensor> = None;
    for (p, &a) in probs.iter().zip(weights.as_array()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
        let pos = (target.mul(&p.log()?)? * pos_w)?;
        let neg = (neg_target.mul(&p.affine(-1.0, 1.0)?.log()?)? * neg_w)?;
        let bce = (pos + neg)?.neg()?.flatten_all()?.mean(D::Minus1)?;
        let term = (bce * a)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("six sides"))
}

pub fn dned_loss(sides: &[EdgeMap], target: &EdgeMap, weights: &EnsembleWeights) -> Result<f64> {
    ensure!(
        sides.len() == N_SIDES,
        "expected {N_SIDES} side outputs, got {}",
        sides.len()
    );
    let dev = Device::Cpu;
    let probs = sides
        .iter()
        .map(|s| s.to_tensor(DType::F64, &dev))
        .collect::<Result<Vec<_>>>()?;
    let target = target.to_tensor(DType::F64, &dev)?;
    let loss = dned_loss_tensor(&probs, &target, weights, false)?;
    Ok(loss.to_scalar::<f64>()?)
}

/// Pixelwise convex combination of side-output tensors.
pub fn ensemble_tensor(probs: &[Tensor], weights: &EnsembleWeights) -> Result<Tensor> {
    ensure!(
        probs.len() == N_SIDES,
        "expected {N_SIDES} side outputs, got {}",
        probs.len()
    );
    let mut acc = (&probs[0] * weights.0[0])?;
    for (p, &a) in probs.iter().zip(weights.as_array()).skip(1) {
        ensure!(p.dims() == acc.dims(), "side output shapes differ");
        acc = (acc + (p * a)?)?;
    }
    Ok(acc)
}

pub fn ensemble_edges(sides: &[EdgeMap], weights: &EnsembleWeights) -> Result<EdgeMap> {
    ensure!(
        sides.len() == N_SIDES,
        "expected {N_SIDES} side outputs, got {}",
        sides.len()
    );
    let (h, w) = (sides[0].height(), sides[0].width());
    ensure!(
        sides.iter().all(|s| s.height() == h && s.width() == w),
        "side output shapes differ"
    );
    let mut data = vec![0f64; h * w];
    for (s, &a) in sides.iter().zip(weights.as_array()) {
        for (acc, &v) in data.iter_mut().zip(s.data()) {
            *acc += a * v as f64;
        }
    }
    let data = data
        .into_iter()
        .map(|v| (v as f32).clamp(0.0, 1.0))
        .collect();
    EdgeMap::new(h, w, crate::tensor::EdgeKind::Soft, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::EdgeKind;

    fn soft(h: usize, w: usize, v: f32) -> EdgeMap {
        EdgeMap::new(h, w, EdgeKind::Soft, vec![v; h * w]).unwrap()
    }

    fn checker(h: usize, w: usize) -> EdgeMap {
        let data = (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect();
        EdgeMap::new(h, w, EdgeKind::Binary, data).unwrap()
    }

    fn gray_image(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w)
            .map(|i| (((i % w) as f32 * 0.37).sin() * ((i / w) as f32 * 0.21).cos()) * 0.9)
            .collect();
        ImageTensor::new(1, h, w, data).unwrap()
    }

    #[test]
    fn forward_emits_six_full_resolution_maps() {
        let net = DnedNetwork::new(DnedConfig::default(), 1, DType::F32, &Device::Cpu).unwrap();
        let sides = dned_forward(&net, &gray_image(32, 64), &LaplacianConfig::default()).unwrap();
        assert_eq!(sides.len(), 6);
        for s in &sides {
            assert_eq!((s.height(), s.width()), (32, 64));
            assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let net = DnedNetwork::new(DnedConfig::default(), 1, DType::F32, &Device::Cpu).unwrap();
        net.params().zero_all().unwrap();
        let sides = dned_forward(&net, &gray_image(32, 32), &LaplacianConfig::default()).unwrap();
        for s in sides {
            assert!(s.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let net =
                DnedNetwork::new(DnedConfig::default(), 42, DType::F32, &Device::Cpu).unwrap();
            dned_forward(&net, &gray_image(32, 32), &LaplacianConfig::default()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = DnedNetwork::new(DnedConfig::default(), 1, DType::F32, &Device::Cpu).unwrap();
        assert!(dned_forward(&net, &gray_image(40, 32), &LaplacianConfig::default()).is_err());
    }

    #[test]
    fn loss_of_half_probabilities_is_ln2() {
        let target = checker(4, 5);
        let sides = vec![soft(4, 5, 0.5); 6];
        for w in [
            EnsembleWeights::uniform(),
            EnsembleWeights::one_hot(3).unwrap(),
            sample_ensemble_weights(0.7, 9).unwrap(),
        ] {
            let l = dned_loss(&sides, &target, &w).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let target = checker(4, 4);
        let sides: Vec<EdgeMap> = (0..6)
            .map(|_| EdgeMap::new(4, 4, EdgeKind::Soft, target.data().to_vec()).unwrap())
            .collect();
        let l = dned_loss(&sides, &target, &EnsembleWeights::uniform()).unwrap();
        assert!((0.0..6.0 * 1.1e-7).contains(&l), "{l}");
    }

    #[test]
    fn one_hot_weights_select_one_side() {
        let target = checker(3, 3);
        let mut sides = vec![soft(3, 3, 0.5); 6];
        sides[0] = soft(3, 3, 0.8);
        let l = dned_loss(&sides, &target, &EnsembleWeights::one_hot(0).unwrap()).unwrap();
        let n_pos = target.count_on() as f64;
        let expected = -(n_pos * 0.8f32.ln() as f64 + (9.0 - n_pos) * (0.2f32 as f64).ln()) / 9.0;
        assert!((l - expected).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let sides = vec![soft(3, 3, 0.5); 6];
        assert!(dned_loss(&sides, &checker(3, 4), &EnsembleWeights::uniform()).is_err());
        assert!(dned_loss(&sides[..5], &checker(3, 3), &EnsembleWeights::uniform()).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let same = vec![soft(2, 2, 0.3); 6];
        let e = ensemble_edges(&same, &sample_ensemble_weights(2.0, 1).unwrap()).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let mut mixed = vec![soft(2, 2, 0.5); 6];
        mixed[0] = soft(2, 2, 0.0);
        mixed[1] = soft(2, 2, 1.0);
        let e = ensemble_edges(&mixed, &EnsembleWeights::uniform()).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let e = ensemble_edges(&mixed, &EnsembleWeights::one_hot(1).unwrap()).unwrap();
        assert_eq!(e, mixed[1]);
        assert_eq!(e.kind(), EdgeKind::Soft);
    }

    #[test]
    fn dirichlet_draws_live_on_the_simplex() {
        for seed in 0..50 {
            let w = sample_ensemble_weights(0.5 + seed as f64 * 0.1, seed).unwrap();
            let s: f64 = w.as_array().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(w.as_array().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(
            sample_ensemble_weights(3.0, 7).unwrap(),
            sample_ensemble_weights(3.0, 7).unwrap()
        );
        let concentrated = sample_ensemble_weights(1e6, 3).unwrap();
        assert!(concentrated
            .as_array()
            .iter()
            .all(|&v| (v - 1.0 / 6.0).abs() < 1e-2));
        assert!(sample_ensemble_weights(0.0, 1).is_err());
        assert!(sample_ensemble_weights(-1.0, 1).is_err());
    }

    #[test]
    fn weights_must_be_convex() {
        assert!(EnsembleWeights::new([0.5, 0.5, 0.0, 0.0, 0.0, 0.1]).is_err());
        assert!(EnsembleWeights::new([1.5, -0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(EnsembleWeights::new([0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = DnedNetwork::new(DnedConfig::default(), 5, DType::F32, &Device::Cpu).unwrap();
        net.save(dir.path(), [32, 32], 17).unwrap();
        let (back, manifest) = DnedNetwork::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(manifest.training_step, 17);
        assert_eq!(manifest.stage_widths, [16, 32, 64, 128, 256, 256]);
        let img = gray_image(32, 32);
        let cfg = LaplacianConfig::default();
        assert_eq!(
            dned_forward(&net, &img, &cfg).unwrap(),
            dned_forward(&back, &img, &cfg).unwrap()
        );
    }
}

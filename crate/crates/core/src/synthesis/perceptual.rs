//! Frozen feature networks for the perceptual loss.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, Params};

/// A fixed network exposing `P` activation taps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the input itself as the only tap (`P = 1`).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Seed-pinned random-weight network, five taps.
    Random { seed: u64 },
    /// VGG-19 `features.*` weights in safetensors format (torchvision naming),
    /// tapped after relu1_1, relu2_1, relu3_1, relu4_1 and relu5_1.
    Vgg19 { path: std::path::PathBuf },
}

impl Default for PerceptualSource {
    fn default() -> Self {
        PerceptualSource::Random { seed: 0x5eed }
    }
}

enum Layer {
    Conv(Conv2d),
    Pool,
    Tap,
}

/// Convolution stack with frozen weights.
pub struct PerceptualExtractor {
    layers: Vec<Layer>,
    /// Per-channel `(scale, shift)` applied to `[-1,1]` input before the stack.
    input_affine: Option<(Tensor, Tensor)>,
}

const RANDOM_WIDTHS: [usize; 5] = [16, 32, 48, 64, 64];

/// (conv index, in, out) for the VGG-19 convs up to conv5_1, with pooling
/// after indices 2, 7, 16 and 25 and taps after 0, 5, 10, 19 and 28.
const VGG19_CONVS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (16, 256, 256),
    (19, 256, 512),
    (21, 512, 512),
    (23, 512, 512),
    (25, 512, 512),
    (28, 512, 512),
];

impl PerceptualExtractor {
    pub fn from_source(src: &PerceptualSource, dtype: DType, device: &Device) -> Result<Self> {
        match src {
            PerceptualSource::Random { seed } => Self::random(*seed, dtype, device),
            PerceptualSource::Vgg19 { path } => Self::vgg19(path, dtype, device),
        }
    }

    /// Five conv blocks with He-normal random weights, one tap per block.
    pub fn random(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut p = Params::new(seed, dtype, device);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in RANDOM_WIDTHS.iter().enumerate() {
            if i > 0 {
                layers.push(Layer::Pool);
            }
            let conv = Conv2d::new(
                &mut p,
                &format!("block{i}"),
                ConvSpec::new(in_ch, w, 3),
                Init::HeNormal,
            )?;
            layers.push(Layer::Conv(conv.frozen()));
            layers.push(Layer::Tap);
            in_ch = w;
        }
        Ok(Self {
            layers,
            input_affine: None,
        })
    }

    /// Loads VGG-19 convolution weights (`features.{i}.weight/bias`).
    pub fn vgg19(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let map = candle_core::safetensors::load(path, device).map_err(|e| Error::load(path, e))?;
        let fetch = |name: String, dims: &[usize]| -> Result<Tensor> {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::load(path, format!("missing tensor {name}")))?;
            if t.dims() != dims {
                return Err(Error::load(
                    path,
                    format!("{name} has shape {:?}, expected {dims:?}", t.dims()),
                ));
            }
            Ok(t.to_dtype(dtype)?.detach())
        };
        let mut layers = Vec::new();
        for &(idx, cin, cout) in &VGG19_CONVS {
            if matches!(idx, 5 | 10 | 19 | 28) {
                layers.push(Layer::Pool);
            }
            let w = fetch(format!("features.{idx}.weight"), &[cout, cin, 3, 3])?;
            let b = fetch(format!("features.{idx}.bias"), &[cout])?;
            layers.push(Layer::Conv(Conv2d::from_tensors(w, Some(b), 1, 1)));
            if matches!(idx, 0 | 5 | 10 | 19 | 28) {
                layers.push(Layer::Tap);
            }
        }
        // [-1,1] -> [0,1] -> ImageNet statistics.
        let mean = [0.485f64, 0.456, 0.406];
        let std = [0.229f64, 0.224, 0.225];
        let scale: Vec<f64> = std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| (0.5 - m) / s).collect();
        let mk = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (1, 3, 1, 1), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            layers,
            input_affine: Some((mk(scale)?, mk(shift)?)),
        })
    }

    pub fn num_taps(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Tap))
            .count()
    }
}

impl FeatureExtractor for PerceptualExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = match &self.input_affine {
            Some((scale, shift)) => x.broadcast_mul(scale)?.broadcast_add(shift)?,
            None => x.clone(),
        };
        let mut taps = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => x = c.forward(&x)?.relu()?,
                // Inputs smaller than the pyramid keep their last resolution.
                Layer::Pool if x.dim(2)? >= 2 && x.dim(3)? >= 2 => x = x.avg_pool2d(2)?,
                Layer::Pool => {}
                Layer::Tap => taps.push(x.clone()),
            }
        }
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn random_extractor_has_five_taps() {
        let p = PerceptualExtractor::random(1, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(p.num_taps(), 5);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let f = p.features(&x).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(f[4].dims(), &[1, 64, 2, 2]);
    }

    #[test]
    fn vgg19_loader_reads_torchvision_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg19.safetensors");
        let dev = Device::Cpu;
        let mut map = HashMap::new();
        for &(idx, cin, cout) in &VGG19_CONVS {
            map.insert(
                format!("features.{idx}.weight"),
                Tensor::zeros((cout, cin, 3, 3), DType::F32, &dev).unwrap(),
            );
            map.insert(
                format!("features.{idx}.bias"),
                Tensor::ones(cout, DType::F32, &dev).unwrap(),
            );
        }
        candle_core::safetensors::save(&map, &path).unwrap();
        let p = PerceptualExtractor::vgg19(&path, DType::F32, &dev).unwrap();
        assert_eq!(p.num_taps(), 5);
        let f = p
            .features(&Tensor::zeros((1, 3, 32, 32), DType::F32, &dev).unwrap())
            .unwrap();
        assert_eq!(f[0].dims(), &[1, 64, 32, 32]);
        assert_eq!(f[4].dims(), &[1, 512, 2, 2]);

        map.remove("features.28.bias");
        candle_core::safetensors::save(&map, &path).unwrap();
        assert!(PerceptualExtractor::vgg19(&path, DType::F32, &dev).is_err());
    }
}

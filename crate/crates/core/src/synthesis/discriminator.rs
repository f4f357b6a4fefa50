use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{instance_norm, leaky_relu, resize, Conv2d, ConvSpec, Init, Params, Resample};

/// Intermediate activations and patch logits of one discriminator scale.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub features: Vec<Tensor>,
    pub logits: Tensor,
}

/// A (possibly multi-scale) conditional patch classifier `D(s, x)`.
pub trait Discriminator {
    /// One entry per scale; `semantic` is `N×C×H×W`, `image` is `N×3×H×W`.
    fn forward(&self, semantic: &Tensor, image: &Tensor) -> Result<Vec<ScaleOutput>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub n_classes: usize,
    /// Number of scales `l_m`.
    pub scales: usize,
    pub base_width: usize,
    /// Hidden layers per scale; each one is a feature tap.
    pub n_layers: usize,
}

impl DiscriminatorConfig {
    pub fn new(n_classes: usize, scales: usize) -> Self {
        Self {
            n_classes,
            scales,
            base_width: 32,
            n_layers: 4,
        }
    }
}

struct PatchClassifier {
    hidden: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchClassifier {
    fn forward(&self, x: &Tensor) -> Result<ScaleOutput> {
        let mut features = Vec::with_capacity(self.hidden.len());
        let mut x = x.clone();
        for (i, conv) in self.hidden.iter().enumerate() {
            let y = conv.forward(&x)?;
            let y = if i == 0 { y } else { instance_norm(&y)? };
            x = leaky_relu(&y, 0.2)?;
            features.push(x.clone());
        }
        let logits = self.out.forward(&x)?;
        Ok(ScaleOutput { features, logits })
    }
}

/// Patch classifiers applied to a 2× area-downsampled input pyramid.
pub struct MultiScaleDiscriminator {
    config: DiscriminatorConfig,
    params: Params,
    scales: Vec<PatchClassifier>,
}

impl MultiScaleDiscriminator {
    pub fn new(
        config: DiscriminatorConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        ensure!(config.scales >= 1, "discriminator needs at least one scale");
        ensure!(
            config.n_layers >= 1,
            "discriminator needs at least one feature layer"
        );
        let mut p = Params::new(seed, dtype, device);
        let mut scales = Vec::with_capacity(config.scales);
        for k in 0..config.scales {
            let mut hidden = Vec::with_capacity(config.n_layers);
            let mut in_ch = config.n_classes + 3;
            for i in 0..config.n_layers {
                let out_ch = config.base_width << i.min(3);
                // The last hidden layer keeps resolution, the others halve it.
                let stride = if i + 1 == config.n_layers && config.n_layers > 1 {
                    1
                } else {
                    2
                };
                hidden.push(Conv2d::new(
                    &mut p,
                    &format!("scale{k}.layer{i}"),
                    ConvSpec::new(in_ch, out_ch, 4).stride(stride).padding(2),
                    Init::FanInUniform,
                )?);
                in_ch = out_ch;
            }
            let out = Conv2d::new(
                &mut p,
                &format!("scale{k}.logits"),
                ConvSpec::new(in_ch, 1, 4).padding(2),
                Init::FanInUniform,
            )?;
            scales.push(PatchClassifier { hidden, out });
        }
        Ok(Self {
            config,
            params: p,
            scales,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }
}

impl Discriminator for MultiScaleDiscriminator {
    fn forward(&self, semantic: &Tensor, image: &Tensor) -> Result<Vec<ScaleOutput>> {
        ensure!(
            semantic.dim(1)? == self.config.n_classes,
            "semantic tensor has {} classes, discriminator expects {}",
            semantic.dim(1)?,
            self.config.n_classes
        );
        let (sn, _, sh, sw) = semantic.dims4()?;
        let (xn, xc, xh, xw) = image.dims4()?;
        ensure!(
            (sn, sh, sw) == (xn, xh, xw) && xc == 3,
            "semantic {:?} and image {:?} are not aligned",
            semantic.dims(),
            image.dims()
        );
        let mut x = Tensor::cat(&[semantic, &image.to_dtype(semantic.dtype())?], 1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, scale) in self.scales.iter().enumerate() {
            if k > 0 {
                let (h, w) = (x.dim(2)?, x.dim(3)?);
                x = resize(&x, h.div_ceil(2), w.div_ceil(2), Resample::Area)?;
            }
            out.push(scale.forward(&x)?);
        }
        Ok(out)
    }
}

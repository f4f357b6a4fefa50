use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{instance_norm, Conv2d, ConvSpec, Init, Params};
use crate::tensor::{EdgeMap, ImageTensor, SemanticTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub base_width: usize,
    pub n_down: usize,
    pub n_res: usize,
}

impl GeneratorConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            base_width: 32,
            n_down: 3,
            n_res: 4,
        }
    }
}

/// Encoder / residual trunk / decoder network mapping a one-hot semantic map
/// concatenated with an edge map to a `tanh` RGB image.
pub struct Generator {
    config: GeneratorConfig,
    params: Params,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<[Conv2d; 2]>,
    ups: Vec<Conv2d>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        ensure!(config.n_classes >= 1, "generator needs at least one class");
        ensure!(config.base_width >= 1, "generator width must be positive");
        let mut p = Params::new(seed, dtype, device);
        let w = config.base_width;
        let stem = Conv2d::new(
            &mut p,
            "stem",
            ConvSpec::new(config.n_classes + 1, w, 7).replicate(),
            Init::FanInUniform,
        )?;
        let mut downs = Vec::new();
        let mut ch = w;
        for i in 0..config.n_down {
            downs.push(Conv2d::new(
                &mut p,
                &format!("down{i}"),
                ConvSpec::new(ch, ch * 2, 3).stride(2),
                Init::FanInUniform,
            )?);
            ch *= 2;
        }
        let mut res = Vec::new();
        for i in 0..config.n_res {
            let a = Conv2d::new(
                &mut p,
                &format!("res{i}.a"),
                ConvSpec::new(ch, ch, 3).replicate(),
                Init::FanInUniform,
            )?;
            let b = Conv2d::new(
                &mut p,
                &format!("res{i}.b"),
                ConvSpec::new(ch, ch, 3).replicate(),
                Init::FanInUniform,
            )?;
            res.push([a, b]);
        }
        let mut ups = Vec::new();
        for i in 0..config.n_down {
            ups.push(Conv2d::new(
                &mut p,
                &format!("up{i}"),
                ConvSpec::new(ch, ch / 2, 3).replicate(),
                Init::FanInUniform,
            )?);
            ch /= 2;
        }
        let head = Conv2d::new(
            &mut p,
            "head",
            ConvSpec::new(ch, 3, 7).replicate(),
            Init::FanInUniform,
        )?;
        Ok(Self {
            config,
            params: p,
            stem,
            downs,
            res,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// `semantic`: `N×C×H×W` one-hot, `edges`: `N×1×H×W`; returns `N×3×H×W`.
    pub fn forward(&self, semantic: &Tensor, edges: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = semantic.dims4()?;
        ensure!(
            c == self.config.n_classes,
            "semantic tensor has {c} classes, generator expects {}",
            self.config.n_classes
        );
        ensure!(
            edges.dims() == [n, 1, h, w],
            "edge tensor {:?} is not aligned with semantic map {:?}",
            edges.dims(),
            semantic.dims()
        );
        let factor = 1usize << self.config.n_down;
        ensure!(
            h % factor == 0 && w % factor == 0,
            "input {h}x{w} must be divisible by {factor}"
        );
        let x = Tensor::cat(&[semantic, &edges.to_dtype(semantic.dtype())?], 1)?;
        let mut x = instance_norm(&self.stem.forward(&x)?)?.relu()?;
        for d in &self.downs {
            x = instance_norm(&d.forward(&x)?)?.relu()?;
        }
        for [a, b] in &self.res {
            let y = instance_norm(&a.forward(&x)?)?.relu()?;
            let y = instance_norm(&b.forward(&y)?)?;
            x = (x + y)?;
        }
        for u in &self.ups {
            let (uh, uw) = (x.dim(2)? * 2, x.dim(3)? * 2);
            x = instance_norm(&u.forward(&x.upsample_nearest2d(uh, uw)?)?)?.relu()?;
        }
        Ok(self.head.forward(&x)?.tanh()?)
    }
}

/// Generates one image from a semantic map and an aligned edge map.
pub fn generator_forward(g: &Generator, s: &SemanticTensor, e: &EdgeMap) -> Result<ImageTensor> {
    ensure!(
        s.height() == e.height() && s.width() == e.width(),
        "semantic map {}x{} and edge map {}x{} are not aligned",
        s.height(),
        s.width(),
        e.height(),
        e.width()
    );
    let (dtype, dev) = (g.params.dtype(), g.params.device());
    let out = g.forward(&s.to_tensor(dtype, dev)?, &e.to_tensor(dtype, dev)?)?;
    ImageTensor::from_tensor(&out)
}

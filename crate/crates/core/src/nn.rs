//! Small neural-network toolkit on top of `candle`: a seeded parameter store,
//! convolution layers, normalisation, separable resampling and a backward
//! pass that tolerates deep graphs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Named trainable tensors with deterministic, seed-driven initialisation.
///
/// Names are kept sorted so that optimizer state and checkpoints have a
/// stable order.
pub struct Params {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        ensure!(
            !self.vars.contains_key(name),
            "duplicate parameter name {name}"
        );
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&self) -> Result<()> {
        for v in self.vars.values() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads a blob written by [`Params::save`]; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let map =
            candle_core::safetensors::load(path, &self.device).map_err(|e| Error::load(path, e))?;
        self.load_map(&map, path)
    }

    pub(crate) fn load_map(&self, map: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::load(path, format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::load(
                    path,
                    format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    ),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &Params) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .vars
                .get(name)
                .ok_or_else(|| Error::Validation(format!("parameter {name} missing in source")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// 2-D convolution with optional bias and replicate or zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    replicate: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub replicate: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            replicate: false,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn replicate(mut self) -> Self {
        self.replicate = true;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(±1/sqrt(fan_in))` for weight and bias.
    FanInUniform,
    /// `N(0, 2/fan_in)` weights and zero bias, for fixed random feature nets.
    HeNormal,
}

impl Conv2d {
    pub fn new(p: &mut Params, name: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f64;
        let shape = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
        let (weight, bias) = match init {
            Init::FanInUniform => {
                let bound = 1.0 / fan_in.sqrt();
                let w = p.uniform(&format!("{name}.weight"), &shape, bound)?;
                let b = if spec.bias {
                    Some(p.uniform(&format!("{name}.bias"), &[spec.out_ch], bound)?)
                } else {
                    None
                };
                (w, b)
            }
            Init::HeNormal => {
                let w = p.normal(&format!("{name}.weight"), &shape, (2.0 / fan_in).sqrt())?;
                let b = if spec.bias {
                    Some(p.uniform(&format!("{name}.bias"), &[spec.out_ch], 0.0)?)
                } else {
                    None
                };
                (w, b)
            }
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            replicate: spec.replicate,
        })
    }

    /// Wraps existing tensors (used for imported pretrained weights).
    pub fn from_tensors(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
            replicate: false,
        }
    }

    /// Detaches the weights so no gradient is ever tracked for them.
    pub fn frozen(self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.map(|b| b.detach()),
            ..self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.replicate && self.padding > 0 {
            let x = x
                .pad_with_same(2, self.padding, self.padding)?
                .pad_with_same(3, self.padding, self.padding)?;
            x.conv2d(&self.weight, 0, self.stride, 1, 1)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalisation over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}

/// Row-stochastic `out×inp` bilinear interpolation matrix (half-pixel centres,
/// edge clamped).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0f64; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    m
}

/// Row-stochastic `out×inp` box-filter (area) resampling matrix.
pub fn area_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0f64; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let (start, end) = (i as f64 * scale, (i + 1) as f64 * scale);
        let mut j = start.floor() as usize;
        while (j as f64) < end && j < inp {
            let overlap = (end.min(j as f64 + 1.0) - start.max(j as f64)).max(0.0);
            m[i * inp + j] += overlap / scale;
            j += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Area,
}

/// Resizes the two trailing dimensions of a tensor of rank ≥ 2 with separable
/// matrix products; differentiable in the input.
pub fn resize(x: &Tensor, height: usize, width: usize, mode: Resample) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let rank = dims.len();
    ensure!(rank >= 2, "resize needs at least two dimensions");
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    if h == height && w == width {
        return Ok(x.clone());
    }
    let lead: usize = dims[..rank - 2].iter().product();
    let build = |o: usize, i: usize| match mode {
        Resample::Bilinear => bilinear_matrix(o, i),
        Resample::Area => area_matrix(o, i),
    };
    let (dtype, dev) = (x.dtype(), x.device());
    // (lead*h, w) x (w, W)
    let mw = Tensor::from_vec(build(width, w), (width, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let y = x.reshape((lead * h, w))?.matmul(&mw.contiguous()?)?;
    // (lead, h, W) -> (lead, W, h) x (h, H)
    let mh = Tensor::from_vec(build(height, h), (height, h), dev)?
        .to_dtype(dtype)?
        .t()?;
    let y = y
        .reshape((lead, h, width))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((lead * width, h))?
        .matmul(&mh.contiguous()?)?;
    let mut out_dims = dims[..rank - 2].to_vec();
    out_dims.extend([height, width]);
    let y = y
        .reshape((lead, width, height))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape(out_dims)?;
    Ok(y)
}

/// Runs `loss.backward()` on a thread with a large stack: the graph walk in
/// `candle` recurses once per node depth, and unrolled solvers are deep.
pub fn backward(loss: &Tensor) -> Result<GradStore> {
    run_with_large_stack(|| loss.backward().map_err(Error::from))
}

pub(crate) const LARGE_STACK: usize = 1 << 30;

pub(crate) fn run_with_large_stack<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(LARGE_STACK)
            .spawn_scoped(s, f)
            .map_err(|e| Error::io("<thread>", e))?
            .join()
            .unwrap_or_else(|p| std::panic::resume_unwind(p))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

pub fn adam(vars: Vec<Var>, cfg: &AdamConfig) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

/// Applies one optimizer step. Variables without a gradient are left alone.
pub fn step(opt: &mut AdamW, grads: &GradStore) -> Result<()> {
    opt.step(grads)?;
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

//! Image, label and edge containers shared by every stage of the pipeline.
//!
//! All containers are immutable, channel-first `f32` buffers. Conversion to
//! batched `candle` tensors (`N×C×H×W`) happens at the network boundary.

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Error, Result};

/// Float image in `[-1, 1]`, stored channel-first (`C×H×W`) with `C ∈ {1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            channels == 1 || channels == 3,
            "image must have 1 or 3 channels, got {channels}"
        );
        ensure!(height > 0 && width > 0, "image must be non-empty");
        ensure!(
            data.len() == channels * height * width,
            "image buffer has {} values, expected {}",
            data.len(),
            channels * height * width
        );
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < -1.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "image value {v} outside the finite range [-1, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Like [`ImageTensor::new`] but clamps finite values into `[-1, 1]` first.
    pub fn new_clamped(
        channels: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `C×H×W` or `1×C×H×W` tensor, clamping into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::Validation(format!(
                    "expected a single image tensor, got shape {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new_clamped(c, h, w, data)
    }

    /// Stacks equally shaped images into an `N×C×H×W` tensor.
    pub fn stack(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        ensure!(!images.is_empty(), "cannot stack an empty image batch");
        let first = images[0];
        ensure!(
            images.iter().all(|i| i.same_shape(first)),
            "all images in a batch must share one shape"
        );
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(
            data,
            (images.len(), first.channels, first.height, first.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Crops the window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            "crop window out of bounds"
        );
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let start = (c * self.height + y) * self.width + x0;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Mean absolute difference; shapes must match.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        ensure!(self.same_shape(other), "image shapes differ");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Maps an 8-bit `H×W×C` (row-major, interleaved) buffer to `[-1, 1]`.
pub fn normalize_image(
    raw: &[u8],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<ImageTensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::Encoding(format!(
            "unsupported channel count {channels}, expected 1 or 3"
        )));
    }
    if raw.len() != height * width * channels {
        return Err(Error::Encoding(format!(
            "buffer has {} bytes, expected {}x{}x{}",
            raw.len(),
            height,
            width,
            channels
        )));
    }
    let mut data = vec![0f32; raw.len()];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * height * width + i] = v as f32 / 127.5 - 1.0;
        }
    }
    ImageTensor::new(channels, height, width, data)
}

/// Inverse of [`normalize_image`], rounding to the nearest 8-bit level.
pub fn denormalize_image(img: &ImageTensor) -> Vec<u8> {
    let (c, hw) = (img.channels, img.height * img.width);
    let mut out = vec![0u8; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            let v = (img.data[ch * hw + i] + 1.0) * 127.5;
            out[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Integer class-ID map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    n_classes: usize,
    labels: Vec<u32>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, n_classes: usize, labels: Vec<u32>) -> Result<Self> {
        ensure!(n_classes >= 1, "class count must be at least 1");
        ensure!(
            labels.len() == height * width,
            "label buffer has {} entries, expected {}",
            labels.len(),
            height * width
        );
        if let Some(l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Validation(format!(
                "label {l} is not below the class count {n_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            n_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.width) {
            row.reverse();
        }
        Self { labels, ..*self }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            "crop window out of bounds"
        );
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            n_classes: self.n_classes,
            labels,
        })
    }
}

/// One-hot encoding of a [`SemanticMap`], `C_classes×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTensor {
    n_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SemanticTensor {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.n_classes, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn stack(items: &[&SemanticTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        ensure!(!items.is_empty(), "cannot stack an empty semantic batch");
        let f = items[0];
        ensure!(
            items
                .iter()
                .all(|s| s.n_classes == f.n_classes && s.height == f.height && s.width == f.width),
            "all semantic tensors in a batch must share one shape"
        );
        let mut data = Vec::with_capacity(items.len() * f.data.len());
        for s in items {
            data.extend_from_slice(&s.data);
        }
        let t = Tensor::from_vec(data, (items.len(), f.n_classes, f.height, f.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

pub fn one_hot_semantic(map: &SemanticMap, n_classes: usize) -> Result<SemanticTensor> {
    ensure!(n_classes >= 1, "class count must be at least 1");
    let hw = map.height * map.width;
    let mut data = vec![0f32; n_classes * hw];
    for (i, &l) in map.labels.iter().enumerate() {
        let l = l as usize;
        ensure!(
            l < n_classes,
            "label {l} is not below the class count {n_classes}"
        );
        data[l * hw + i] = 1.0;
    }
    Ok(SemanticTensor {
        n_classes,
        height: map.height,
        width: map.width,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Thresholded operator output, entries in `{0, 1}`.
    Binary,
    /// Network output or ensemble, entries in `[0, 1]`.
    Soft,
}

/// Single-channel edge skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    kind: EdgeKind,
    data: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, kind: EdgeKind, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "edge buffer has {} entries, expected {}",
            data.len(),
            height * width
        );
        let ok = match kind {
            EdgeKind::Binary => data.iter().all(|&v| v == 0.0 || v == 1.0),
            EdgeKind::Soft => data.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        ensure!(ok, "edge values violate the {kind:?} range");
        Ok(Self {
            height,
            width,
            kind,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> EdgeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads an `H×W`, `1×H×W` or `1×1×H×W` tensor as a soft map (clamped to `[0,1]`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = t.to_dtype(DType::F32)?;
        let dims = t.dims().to_vec();
        ensure!(
            dims.len() >= 2 && dims[..dims.len() - 2].iter().all(|&d| d == 1),
            "expected a single-channel edge tensor, got {dims:?}"
        );
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let data = t
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, EdgeKind::Soft, data)
    }

    pub fn stack(items: &[&EdgeMap], dtype: DType, device: &Device) -> Result<Tensor> {
        ensure!(!items.is_empty(), "cannot stack an empty edge batch");
        let (h, w) = (items[0].height, items[0].width);
        ensure!(
            items.iter().all(|e| e.height == h && e.width == w),
            "all edge maps in a batch must share one shape"
        );
        let mut data = Vec::with_capacity(items.len() * h * w);
        for e in items {
            data.extend_from_slice(&e.data);
        }
        let t = Tensor::from_vec(data, (items.len(), 1, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            "crop window out of bounds"
        );
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            kind: self.kind,
            data,
        })
    }

    /// Gray `[-1,1]` rendering (edge = white) for montages and dumps.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * 2.0 - 1.0).collect(),
        }
    }
}

//! Dense optical flow: coarse-to-fine Horn–Schunck with Jacobi updates,
//! bilinear backward warping, and `.flo` export.
//!
//! The solver is written entirely in tensor operations so the same code path
//! serves both plain estimation and the differentiable temporal loss: every
//! iteration is a fixed sequence of convolutions and pointwise ops, hence
//! gradients flow back into both input frames.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::edges::LUMA_WEIGHTS;
use crate::error::{ensure, Error, Result};
use crate::nn::{resize, Resample};
use crate::tensor::ImageTensor;

/// Magic number heading a Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement `(dx, dy)` from frame `t` to frame `t+1`, stored as
/// two `H×W` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == 2 * height * width,
            "flow buffer has {} values, expected {}",
            data.len(),
            2 * height * width
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "flow contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let n = height * width;
        let mut data = vec![dx; 2 * n];
        data[n..].fill(dy);
        Self {
            height,
            width,
            data,
        }
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

    pub fn dx(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn dy(&self, y: usize, x: usize) -> f32 {
        self.data[self.height * self.width + y * self.width + x]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 2, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 {
            t.squeeze(0)?
        } else {
            t.clone()
        };
        let (c, h, w) = t.dims3()?;
        ensure!(c == 2, "flow tensor must have 2 channels, got {c}");
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    /// Mean endpoint error against `reference` over pixels selected by `mask`.
    pub fn mean_epe(
        &self,
        reference: &FlowField,
        mask: impl Fn(usize, usize) -> bool,
    ) -> Result<f64> {
        ensure!(
            self.height == reference.height && self.width == reference.width,
            "flow shapes differ"
        );
        let (mut sum, mut n) = (0f64, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask(y, x) {
                    let ex = (self.dx(y, x) - reference.dx(y, x)) as f64;
                    let ey = (self.dy(y, x) - reference.dy(y, x)) as f64;
                    sum += (ex * ex + ey * ey).sqrt();
                    n += 1;
                }
            }
        }
        ensure!(n > 0, "endpoint-error mask selects no pixels");
        Ok(sum / n as f64)
    }

    /// Population variance of both components pooled together.
    pub fn variance(&self) -> f64 {
        let n = self.height * self.width;
        let mut total = 0.0;
        for plane in self.data.chunks(n) {
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            total += plane
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
        }
        total
    }

    /// Middlebury `.flo`: magic, width, height (little-endian), then
    /// interleaved `(dx, dy)` pairs in row-major order.
    pub fn write_flo(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&FLO_MAGIC.to_le_bytes())?;
        w.write_all(&(self.width as i32).to_le_bytes())?;
        w.write_all(&(self.height as i32).to_le_bytes())?;
        let n = self.height * self.width;
        for i in 0..n {
            w.write_all(&self.data[i].to_le_bytes())?;
            w.write_all(&self.data[n + i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_flo(mut r: impl Read) -> Result<Self> {
        let mut buf = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 4]> {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Encoding(format!("truncated .flo data: {e}")))?;
            Ok(buf)
        };
        let magic = f32::from_le_bytes(next(&mut r)?);
        if magic != FLO_MAGIC {
            return Err(Error::Encoding(format!("bad .flo magic {magic}")));
        }
        let width = i32::from_le_bytes(next(&mut r)?);
        let height = i32::from_le_bytes(next(&mut r)?);
        if width <= 0 || height <= 0 {
            return Err(Error::Encoding(format!("bad .flo size {width}x{height}")));
        }
        let (w, h) = (width as usize, height as usize);
        let mut data = vec![0f32; 2 * w * h];
        for i in 0..w * h {
            data[i] = f32::from_le_bytes(next(&mut r)?);
            data[w * h + i] = f32::from_le_bytes(next(&mut r)?);
        }
        Self::new(h, w, data)
    }

    pub fn save_flo(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_flo(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Regularisation strength `alpha`, in 8-bit intensity units.
    pub smoothness: f64,
    /// Jacobi iterations per pyramid level.
    pub iterations: usize,
    pub pyramid_levels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            smoothness: 15.0,
            iterations: 100,
            pyramid_levels: 3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.smoothness.is_finite() && self.smoothness > 0.0,
            "flow smoothness must be > 0"
        );
        ensure!(self.iterations >= 1, "flow iterations must be >= 1");
        ensure!(
            self.pyramid_levels >= 1,
            "flow pyramid needs at least one level"
        );
        Ok(())
    }

    /// `alpha²` on `[-1, 1]` intensities.
    fn alpha_sq(&self) -> f64 {
        let a = self.smoothness / 127.5;
        a * a
    }
}

/// Anything that maps two `N×1×H×W` gray frames to an `N×2×H×W` flow tensor.
pub trait FlowEstimator {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HornSchunck {
    pub config: FlowConfig,
}

impl HornSchunck {
    pub fn new(config: FlowConfig) -> Self {
        Self { config }
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        estimate_flow_tensor(a, b, &self.config)
    }
}

/// Luma of an `N×3×H×W` tensor (gray input passes through).
pub fn gray_tensor(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c == 1 {
        return Ok(x.clone());
    }
    ensure!(c == 3, "expected 1 or 3 channels, got {c}");
    let w = Tensor::new(&LUMA_WEIGHTS, x.device())?
        .to_dtype(x.dtype())?
        .reshape((1, 3, 1, 1))?;
    Ok(x.broadcast_mul(&w)?.sum_keepdim(1)?)
}

fn stencil(values: [f64; 9], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(&values, like.device())?
        .to_dtype(like.dtype())?
        .reshape((1, 1, 3, 3))?)
}

/// 3×3 filter with replicate padding, applied to every channel of `x`.
fn filter3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n * c, 1, h, w))?;
    let padded = flat.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    Ok(padded.conv2d(kernel, 0, 1, 1, 1)?.reshape((n, c, h, w))?)
}

fn pixel_grid(
    n: usize,
    h: usize,
    w: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let xs = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, 1, w))?
        .broadcast_as((n, 1, h, w))?;
    let ys = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, h, 1))?
        .broadcast_as((n, 1, h, w))?;
    Ok((xs, ys))
}

/// Bilinear backward warp: `out(x) = img(x + flow(x))`, sample positions
/// clamped to the image border. Differentiable in `img` and `flow`.
pub fn warp_tensor(img: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    let (fnb, fc, fh, fw) = flow.dims4()?;
    ensure!(
        fnb == n && fc == 2 && fh == h && fw == w,
        "flow {:?} does not match image {:?}",
        flow.dims(),
        img.dims()
    );
    let (dtype, dev) = (img.dtype(), img.device());
    let (gx, gy) = pixel_grid(n, h, w, dtype, dev)?;
    let px = (flow.narrow(1, 0, 1)? + gx)?.clamp(0f64, (w - 1) as f64)?;
    let py = (flow.narrow(1, 1, 1)? + gy)?.clamp(0f64, (h - 1) as f64)?;
    let x0 = px.detach().floor()?;
    let y0 = py.detach().floor()?;
    let x1 = (&x0 + 1.0)?.clamp(0f64, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0f64, (h - 1) as f64)?;
    let wx = (&px - &x0)?;
    let wy = (&py - &y0)?;

    let flat = img.reshape((n, c, h * w))?;
    let sample = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?
            .to_dtype(DType::U32)?
            .reshape((n, 1, h * w))?
            .broadcast_as((n, c, h * w))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((n, c, h, w))?)
    };
    let v00 = sample(&y0, &x0)?;
    let v01 = sample(&y0, &x1)?;
    let v10 = sample(&y1, &x0)?;
    let v11 = sample(&y1, &x1)?;
    let one_x = wx.affine(-1.0, 1.0)?;
    let one_y = wy.affine(-1.0, 1.0)?;
    let top = (v00.broadcast_mul(&one_x)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&one_x)? + v11.broadcast_mul(&wx)?)?;
    Ok((top.broadcast_mul(&one_y)? + bottom.broadcast_mul(&wy)?)?)
}

pub fn warp(img: &ImageTensor, flow: &FlowField) -> Result<ImageTensor> {
    ensure!(
        img.height() == flow.height() && img.width() == flow.width(),
        "image and flow sizes differ"
    );
    let t = img.to_tensor(DType::F32, &Device::Cpu)?;
    let f = flow.to_tensor(DType::F32, &Device::Cpu)?;
    ImageTensor::from_tensor(&warp_tensor(&t, &f)?)
}

fn pyramid_sizes(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![(h, w)];
    for _ in 1..levels {
        let (ph, pw) = *sizes.last().unwrap();
        sizes.push((ph.div_ceil(2), pw.div_ceil(2)));
    }
    sizes
}

/// Refines `flow` on one pyramid level. The brightness-constancy equation is
/// linearised around the incoming flow after warping `b` towards `a`.
fn refine_level(
    a: &Tensor,
    b: &Tensor,
    flow: &Tensor,
    alpha_sq: f64,
    iterations: usize,
) -> Result<Tensor> {
    let b_warped = warp_tensor(b, flow)?;
    let mean = ((a + &b_warped)? * 0.5)?;
    let dx = stencil([0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0], a)?;
    let dy = stencil([0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0], a)?;
    let avg = stencil(
        [
            1.0 / 12.0,
            1.0 / 6.0,
            1.0 / 12.0,
            1.0 / 6.0,
            0.0,
            1.0 / 6.0,
            1.0 / 12.0,
            1.0 / 6.0,
            1.0 / 12.0,
        ],
        a,
    )?;
    let ix = filter3(&mean, &dx)?;
    let iy = filter3(&mean, &dy)?;
    let it = (&b_warped - a)?;
    let u0 = flow.narrow(1, 0, 1)?;
    let v0 = flow.narrow(1, 1, 1)?;
    let denom = ((ix.sqr()? + iy.sqr()?)? + alpha_sq)?;
    let cx = (&ix / &denom)?;
    let cy = (&iy / &denom)?;
    // Residual offset so that r = Ix·u + Iy·v + c0 with c0 = It − Ix·u0 − Iy·v0.
    let c0 = ((&it - (&ix * &u0)?)? - (&iy * &v0)?)?;

    let mut uv = flow.clone();
    for _ in 0..iterations {
        let bar = filter3(&uv, &avg)?;
        let ub = bar.narrow(1, 0, 1)?;
        let vb = bar.narrow(1, 1, 1)?;
        let r = (((&ix * &ub)? + (&iy * &vb)?)? + &c0)?;
        let u = (ub - (&cx * &r)?)?;
        let v = (vb - (&cy * &r)?)?;
        uv = Tensor::cat(&[u, v], 1)?;
    }
    Ok(uv)
}

/// Coarse-to-fine Horn–Schunck flow from `a` to `b` (`N×1×H×W` each),
/// returning `N×2×H×W`. Differentiable with respect to both frames.
pub fn estimate_flow_tensor(a: &Tensor, b: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    cfg.validate()?;
    ensure!(
        a.dims() == b.dims(),
        "frames have different shapes {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
    let (n, c, h, w) = a.dims4()?;
    ensure!(
        c == 1,
        "flow estimation expects gray frames, got {c} channels"
    );
    let min_side = 1usize << cfg.pyramid_levels;
    ensure!(
        h >= min_side && w >= min_side,
        "frames {h}x{w} are too small for {} pyramid levels",
        cfg.pyramid_levels
    );
    let sizes = pyramid_sizes(h, w, cfg.pyramid_levels);
    let mut pa = vec![a.clone()];
    let mut pb = vec![b.clone()];
    for &(lh, lw) in &sizes[1..] {
        let next_a = resize(pa.last().unwrap(), lh, lw, Resample::Area)?;
        let next_b = resize(pb.last().unwrap(), lh, lw, Resample::Area)?;
        pa.push(next_a);
        pb.push(next_b);
    }
    let alpha_sq = cfg.alpha_sq();
    let (ch, cw) = *sizes.last().unwrap();
    let mut flow = Tensor::zeros((n, 2, ch, cw), a.dtype(), a.device())?;
    for level in (0..sizes.len()).rev() {
        let (lh, lw) = sizes[level];
        let (fh, fw) = (flow.dim(2)?, flow.dim(3)?);
        if (fh, fw) != (lh, lw) {
            let up = resize(&flow, lh, lw, Resample::Bilinear)?;
            let sx = lw as f64 / fw as f64;
            let sy = lh as f64 / fh as f64;
            flow = Tensor::cat(
                &[(up.narrow(1, 0, 1)? * sx)?, (up.narrow(1, 1, 1)? * sy)?],
                1,
            )?;
        }
        flow = refine_level(&pa[level], &pb[level], &flow, alpha_sq, cfg.iterations)?;
    }
    Ok(flow)
}

/// Flow from `a` to `b`. RGB frames are converted to luma first.
pub fn estimate_flow(a: &ImageTensor, b: &ImageTensor, cfg: &FlowConfig) -> Result<FlowField> {
    ensure!(a.same_shape(b), "frames have different shapes");
    let dev = Device::Cpu;
    let ta = gray_tensor(&a.to_tensor(DType::F32, &dev)?)?;
    let tb = gray_tensor(&b.to_tensor(DType::F32, &dev)?)?;
    FlowField::from_tensor(&estimate_flow_tensor(&ta, &tb, cfg)?)
}

/// Per-pixel L1 flow difference `|Δu| + |Δv|`, averaged over pixels and batch.
pub fn mean_abs_flow_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(a.dims() == b.dims(), "flow shapes differ");
    let per_pixel = (a - b)?.abs()?.sum_keepdim(1)?;
    Ok(per_pixel.flatten_all()?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth band-limited texture evaluated at continuous coordinates.
    pub(crate) fn texture(x: f64, y: f64) -> f32 {
        let v = 0.35 * (0.31 * x + 0.17 * y).sin()
            + 0.25 * (0.23 * x - 0.29 * y + 1.3).cos()
            + 0.2 * (0.47 * x + 0.41 * y + 0.4).sin()
            + 0.15 * (0.13 * x * 0.9 + 0.53 * y + 2.0).cos();
        v as f32
    }

    fn fixture(h: usize, w: usize, shift: (f64, f64)) -> ImageTensor {
        let data = (0..h * w)
            .map(|i| texture((i % w) as f64 - shift.0, (i / w) as f64 - shift.1))
            .collect();
        ImageTensor::new(1, h, w, data).unwrap()
    }

    fn interior(margin: usize, h: usize, w: usize) -> impl Fn(usize, usize) -> bool {
        move |y, x| y >= margin && y < h - margin && x >= margin && x < w - margin
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = fixture(32, 32, (0.0, 0.0));
        let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let c = ImageTensor::filled(1, 16, 16, 0.2).unwrap();
        let f = estimate_flow(&c, &c, &FlowConfig::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_unit_translation() {
        let a = fixture(64, 64, (0.0, 0.0));
        let b = fixture(64, 64, (1.0, 0.0));
        let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
        let epe = f
            .mean_epe(&FlowField::constant(64, 64, 1.0, 0.0), interior(8, 64, 64))
            .unwrap();
        assert!(epe <= 0.25, "epe {epe}");
    }

    #[test]
    fn swapping_frames_negates_flow() {
        let a = fixture(64, 64, (0.0, 0.0));
        let b = fixture(64, 64, (1.0, 0.0));
        let cfg = FlowConfig::default();
        let fwd = estimate_flow(&a, &b, &cfg).unwrap();
        let bwd = estimate_flow(&b, &a, &cfg).unwrap();
        let m = interior(8, 64, 64);
        let (mut s, mut n) = (0f64, 0);
        for y in 0..64 {
            for x in 0..64 {
                if m(y, x) {
                    s += ((fwd.dx(y, x) + bwd.dx(y, x)).abs() + (fwd.dy(y, x) + bwd.dy(y, x)).abs())
                        as f64;
                    n += 1;
                }
            }
        }
        assert!(s / n as f64 <= 0.3);
    }

    #[test]
    fn estimation_is_deterministic() {
        let a = fixture(32, 32, (0.0, 0.0));
        let b = fixture(32, 32, (0.5, 0.7));
        let cfg = FlowConfig::default();
        assert_eq!(
            estimate_flow(&a, &b, &cfg).unwrap(),
            estimate_flow(&a, &b, &cfg).unwrap()
        );
    }

    #[test]
    fn smoother_flow_has_lower_variance() {
        let a = fixture(64, 64, (0.0, 0.0));
        let b = fixture(64, 64, (1.0, 0.0));
        let vars: Vec<f64> = [5.0, 15.0, 45.0]
            .iter()
            .map(|&s| {
                let cfg = FlowConfig {
                    smoothness: s,
                    ..Default::default()
                };
                estimate_flow(&a, &b, &cfg).unwrap().variance()
            })
            .collect();
        assert!(vars[0] >= vars[1] && vars[1] >= vars[2], "{vars:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = fixture(16, 16, (0.0, 0.0));
        let b = fixture(16, 8, (0.0, 0.0));
        assert!(estimate_flow(&a, &b, &FlowConfig::default()).is_err());
        let tiny = fixture(4, 4, (0.0, 0.0));
        assert!(estimate_flow(&tiny, &tiny, &FlowConfig::default()).is_err());
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let a = fixture(9, 11, (0.0, 0.0));
        let out = warp(&a, &FlowField::zeros(9, 11)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn integer_warp_shifts_exactly() {
        let a = fixture(9, 11, (0.0, 0.0));
        let out = warp(&a, &FlowField::constant(9, 11, 1.0, 0.0)).unwrap();
        for y in 0..9 {
            for x in 0..10 {
                assert_eq!(out.at(0, y, x), a.at(0, y, x + 1));
            }
        }
        // Out-of-range samples clamp to the border column.
        assert_eq!(out.at(0, 4, 10), a.at(0, 4, 10));
    }

    #[test]
    fn warping_by_estimated_flow_aligns_frames() {
        let a = fixture(64, 64, (0.0, 0.0));
        let b = fixture(64, 64, (1.0, 0.0));
        let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
        let aligned = warp(&b, &f).unwrap();
        let crop = |img: &ImageTensor| img.crop(8, 8, 48, 48).unwrap();
        let before = crop(&b).mean_abs_diff(&crop(&a)).unwrap();
        let after = crop(&aligned).mean_abs_diff(&crop(&a)).unwrap();
        assert!(after <= 0.5 * before, "before {before}, after {after}");
    }

    #[test]
    fn flo_roundtrip() {
        let f = FlowField::new(
            2,
            3,
            vec![
                0.5, -1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0,
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        f.write_flo(&mut buf).unwrap();
        assert_eq!(&buf[..4], &FLO_MAGIC.to_le_bytes());
        assert_eq!(buf.len(), 12 + 2 * 6 * 4);
        // First pixel is stored as (dx, dy) interleaved.
        assert_eq!(f32::from_le_bytes(buf[12..16].try_into().unwrap()), 0.5);
        assert_eq!(f32::from_le_bytes(buf[16..20].try_into().unwrap()), 6.0);
        assert_eq!(FlowField::read_flo(buf.as_slice()).unwrap(), f);
        assert!(FlowField::read_flo(&buf[..10]).is_err());
    }
}

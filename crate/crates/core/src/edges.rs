//! Classical edge extraction: grayscale conversion and a thresholded
//! discrete Laplacian.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{EdgeKind, EdgeMap, ImageTensor};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKernel {
    /// `[[0,1,0],[1,-4,1],[0,1,0]]`
    #[default]
    FourNeighbor,
    /// `[[1,1,1],[1,-8,1],[1,1,1]]`
    EightNeighbor,
}

impl LaplacianKernel {
    pub fn weights(self) -> [[f32; 3]; 3] {
        match self {
            LaplacianKernel::FourNeighbor => [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
            LaplacianKernel::EightNeighbor => [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]],
        }
    }
}

/// Threshold is compared against the absolute response of a `[-1,1]` image;
/// borders use replicate padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplacianConfig {
    pub kernel: LaplacianKernel,
    pub threshold: f32,
}

impl Default for LaplacianConfig {
    fn default() -> Self {
        Self {
            kernel: LaplacianKernel::FourNeighbor,
            threshold: 0.2,
        }
    }
}

impl LaplacianConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.threshold.is_finite() && self.threshold >= 0.0,
            "laplacian threshold must be finite and >= 0, got {}",
            self.threshold
        );
        Ok(())
    }
}

/// Luma mix of an RGB image; single-channel input is returned unchanged.
pub fn to_grayscale(img: &ImageTensor) -> ImageTensor {
    if img.channels() == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b)
        .collect();
    // Convex weights keep the result inside [-1, 1] up to rounding.
    ImageTensor::new_clamped(1, img.height(), img.width(), data)
        .expect("luma of a valid image is valid")
}

/// Signed Laplacian response with replicate padding, `H×W` row-major.
pub fn laplacian_response(gray: &ImageTensor, kernel: LaplacianKernel) -> Result<Vec<f32>> {
    ensure!(
        gray.channels() == 1,
        "laplacian expects a single-channel image"
    );
    let (h, w) = (gray.height(), gray.width());
    ensure!(
        h >= 3 && w >= 3,
        "image {h}x{w} is smaller than the 3x3 kernel"
    );
    let k = kernel.weights();
    let px = gray.plane(0);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let mut acc = 0f32;
            for (ky, &yy) in rows.iter().enumerate() {
                for (kx, &xx) in cols.iter().enumerate() {
                    acc += k[ky][kx] * px[yy * w + xx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// Binary edge map `E(x)`: 1 where the absolute Laplacian response exceeds
/// the threshold. RGB input is converted to luma first.
pub fn laplacian_edge_map(img: &ImageTensor, cfg: &LaplacianConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    let gray = to_grayscale(img);
    let resp = laplacian_response(&gray, cfg.kernel)?;
    let data = resp
        .into_iter()
        .map(|r| if r.abs() > cfg.threshold { 1.0 } else { 0.0 })
        .collect();
    EdgeMap::new(gray.height(), gray.width(), EdgeKind::Binary, data)
}

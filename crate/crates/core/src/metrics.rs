//! Fréchet distances between embedded sample sets and segmentation scores.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, Params};
use crate::tensor::{ImageTensor, SemanticMap};

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, PartialEq)]
enum Covariance {
    Dense(DMatrix<f64>),
    /// `Σ = Fᵀ F` with `F` the centred samples scaled by `1/√(N−1)`;
    /// used when there are fewer samples than dimensions.
    Factor(DMatrix<f64>),
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mu: DVector<f64>,
    cov: Covariance,
}

impl GaussianStats {
    /// Builds stats from explicit moments; `sigma` must be symmetric.
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        ensure!(d >= 1, "stats need at least one dimension");
        ensure!(
            sigma.nrows() == d && sigma.ncols() == d,
            "sigma must be {d}x{d}"
        );
        ensure!(
            (&sigma - sigma.transpose()).amax() <= 1e-8,
            "sigma is not symmetric"
        );
        Ok(Self {
            mu: DVector::from_vec(mu),
            cov: Covariance::Dense(sigma),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Dense covariance (materialised on demand for low-rank stats).
    pub fn sigma(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Dense(s) => s.clone(),
            Covariance::Factor(f) => f.transpose() * f,
        }
    }

    fn trace(&self) -> f64 {
        match &self.cov {
            Covariance::Dense(s) => s.trace(),
            Covariance::Factor(f) => f.norm_squared(),
        }
    }

    fn is_finite(&self) -> bool {
        let cov_ok = match &self.cov {
            Covariance::Dense(s) => s.iter().all(|v| v.is_finite()),
            Covariance::Factor(f) => f.iter().all(|v| v.is_finite()),
        };
        cov_ok && self.mu.iter().all(|v| v.is_finite())
    }
}

/// Sample mean and unbiased covariance of `N×D` features.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    ensure!(n >= 2, "need at least 2 samples for covariance, got {n}");
    let d = features[0].len();
    ensure!(d >= 1, "features are empty");
    ensure!(
        features.iter().all(|f| f.len() == d),
        "features have ragged dimensions"
    );
    let mu: Vec<f64> = (0..d)
        .map(|j| compensated_sum(features.iter().map(|f| f[j])) / n as f64)
        .collect();
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let centred = DMatrix::from_fn(n, d, |i, j| (features[i][j] - mu[j]) * scale);
    let cov = if n <= d {
        Covariance::Factor(centred)
    } else {
        let mut s = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = compensated_sum((0..n).map(|i| centred[(i, a)] * centred[(i, b)]));
                s[(a, b)] = v;
                s[(b, a)] = v;
            }
        }
        Covariance::Dense(s)
    };
    Ok(GaussianStats {
        mu: DVector::from_vec(mu),
        cov,
    })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `tr((Σa Σb)^½)`.
fn trace_sqrt_product(a: &GaussianStats, b: &GaussianStats) -> f64 {
    match (&a.cov, &b.cov) {
        (Covariance::Factor(fa), Covariance::Factor(fb)) => {
            // Non-zero spectrum of ΣaΣb equals that of K Kᵀ with K = Fa Fbᵀ.
            (fa * fb.transpose()).singular_values().iter().sum()
        }
        _ => {
            let sa = sym_sqrt(&a.sigma());
            let m = &sa * b.sigma() * &sa;
            SymmetricEigen::new((&m + m.transpose()) * 0.5)
                .eigenvalues
                .iter()
                .map(|l| l.max(0.0).sqrt())
                .sum()
        }
    }
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        "stats dimensions differ: {} vs {}",
        a.dim(),
        b.dim()
    );
    ensure!(
        a.is_finite() && b.is_finite(),
        "stats contain non-finite values"
    );
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let d = mean_term + a.trace() + b.trace() - 2.0 * trace_sqrt_product(a, b);
    Ok(d.max(0.0))
}

/// Fixed map from an image to a feature vector.
pub trait Embedder {
    fn name(&self) -> &str;
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Raw pixel values.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEmbedder;

impl Embedder for IdentityEmbedder {
    fn name(&self) -> &str {
        "identity"
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(img.data().iter().map(|&v| v as f64).collect())
    }
}

/// Per-channel mean, standard deviation and mean absolute x/y gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameStatsEmbedder;

impl Embedder for FrameStatsEmbedder {
    fn name(&self) -> &str {
        "frame_stats"
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        let mut out = Vec::with_capacity(4 * img.channels());
        for c in 0..img.channels() {
            let p = img.plane(c);
            let n = p.len() as f64;
            let mean = compensated_sum(p.iter().map(|&v| v as f64)) / n;
            let var = compensated_sum(p.iter().map(|&v| (v as f64 - mean).powi(2))) / n;
            let gx = if w > 1 {
                compensated_sum(
                    (0..h)
                        .flat_map(|y| (1..w).map(move |x| (y, x)))
                        .map(|(y, x)| (p[y * w + x] - p[y * w + x - 1]).abs() as f64),
                ) / (h * (w - 1)) as f64
            } else {
                0.0
            };
            let gy = if h > 1 {
                compensated_sum((w..h * w).map(|i| (p[i] - p[i - w]).abs() as f64))
                    / ((h - 1) * w) as f64
            } else {
                0.0
            };
            out.extend([mean, var.sqrt(), gx, gy]);
        }
        Ok(out)
    }
}

/// Seed-pinned random conv net with global average pooling (64 features).
pub struct RandomConvEmbedder {
    convs: Vec<Conv2d>,
}

pub const RANDOM_CONV_SEED: u64 = 0xf1d;

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Result<Self> {
        let mut p = Params::new(seed, DType::F32, &Device::Cpu);
        let widths = [16, 32, 64, 64];
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::new(
                &mut p,
                &format!("embed{i}"),
                ConvSpec::new(cin, w, 3).stride(2).padding(1),
                Init::HeNormal,
            )?;
            convs.push(conv.frozen());
            cin = w;
        }
        Ok(Self { convs })
    }
}

impl Embedder for RandomConvEmbedder {
    fn name(&self) -> &str {
        "random_conv64"
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        ensure!(img.channels() == 3, "random_conv64 embeds RGB images");
        let mut x = img.to_tensor(DType::F32, &Device::Cpu)?;
        for c in &self.convs {
            x = c.forward(&x)?.relu()?;
        }
        let pooled: Tensor = x.mean((2, 3))?.squeeze(0)?;
        Ok(pooled.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

pub const EMBEDDERS: [&str; 3] = ["identity", "frame_stats", "random_conv64"];

/// Looks up an embedder by registry name.
pub fn embedder_by_name(name: &str) -> Result<Box<dyn Embedder>> {
    match name {
        "identity" => Ok(Box::new(IdentityEmbedder)),
        "frame_stats" => Ok(Box::new(FrameStatsEmbedder)),
        "random_conv64" => Ok(Box::new(RandomConvEmbedder::new(RANDOM_CONV_SEED)?)),
        other => Err(Error::Config(format!(
            "unknown embedder {other:?} (available: {})",
            EMBEDDERS.join(", ")
        ))),
    }
}

fn embed_all(images: &[ImageTensor], emb: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| emb.embed(i)).collect()
}

pub fn fid(real: &[ImageTensor], fake: &[ImageTensor], emb: &dyn Embedder) -> Result<f64> {
    frechet_distance(
        &gaussian_stats(&embed_all(real, emb)?)?,
        &gaussian_stats(&embed_all(fake, emb)?)?,
    )
}

/// Clip embedding: mean frame embedding followed by the mean absolute
/// change between consecutive frame embeddings (zero for one frame).
pub fn clip_embedding(clip: &[ImageTensor], emb: &dyn Embedder) -> Result<Vec<f64>> {
    ensure!(!clip.is_empty(), "empty clip");
    let frames = embed_all(clip, emb)?;
    let d = frames[0].len();
    let t = frames.len();
    let mut out: Vec<f64> = (0..d)
        .map(|j| compensated_sum(frames.iter().map(|f| f[j])) / t as f64)
        .collect();
    out.extend((0..d).map(|j| {
        if t < 2 {
            0.0
        } else {
            compensated_sum(frames.windows(2).map(|p| (p[1][j] - p[0][j]).abs())) / (t - 1) as f64
        }
    }));
    Ok(out)
}

pub fn fvd(
    real: &[Vec<ImageTensor>],
    fake: &[Vec<ImageTensor>],
    emb: &dyn Embedder,
) -> Result<f64> {
    let len = real.first().map(Vec::len).unwrap_or(0);
    ensure!(
        real.iter().chain(fake).all(|c| c.len() == len),
        "clips must all have the same length"
    );
    let er = real
        .iter()
        .map(|c| clip_embedding(c, emb))
        .collect::<Result<Vec<_>>>()?;
    let ef = fake
        .iter()
        .map(|c| clip_embedding(c, emb))
        .collect::<Result<Vec<_>>>()?;
    frechet_distance(&gaussian_stats(&er)?, &gaussian_stats(&ef)?)
}

/// Pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        ensure!(
            counts.len() == n_classes * n_classes,
            "expected {} counts",
            n_classes * n_classes
        );
        Ok(Self {
            n: n_classes,
            counts,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n + pred] += 1;
    }

    pub fn accumulate(&mut self, truth: &SemanticMap, pred: &SemanticMap) -> Result<()> {
        ensure!(
            truth.height() == pred.height() && truth.width() == pred.width(),
            "label maps differ in size"
        );
        for (&t, &p) in truth.labels().iter().zip(pred.labels()) {
            ensure!(
                (t as usize) < self.n && (p as usize) < self.n,
                "label {t}/{p} outside {} classes",
                self.n
            );
            self.add(t as usize, p as usize);
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Accuracy and IoU; the mean covers classes present in the ground truth.
pub fn segmentation_scores(cm: &ConfusionMatrix) -> Result<SegmentationScores> {
    let total = cm.total();
    ensure!(total > 0, "confusion matrix is empty");
    let n = cm.n;
    let diag: u64 = (0..n).map(|c| cm.get(c, c)).sum();
    let per_class_iou: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            (row > 0).then(|| cm.get(c, c) as f64 / (row + col - cm.get(c, c)) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(SegmentationScores {
        pixel_accuracy: diag as f64 / total as f64,
        mean_iou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
    })
}

/// Evaluation report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub embedder_name: String,
    pub n_samples: usize,
}

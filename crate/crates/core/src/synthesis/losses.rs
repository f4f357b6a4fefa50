//! Image-domain training losses and the combined objective.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, ScaleOutput};
use super::perceptual::FeatureExtractor;
use crate::error::{ensure, Error, Result};
use crate::nn::{scalar, softplus};

fn mean_all(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_all()?.mean(D::Minus1)?)
}

fn mean_over(terms: Vec<Tensor>) -> Result<Tensor> {
    ensure!(!terms.is_empty(), "no discriminator scales");
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// `−E[log D(real)] − E[log(1 − D(fake))]`, averaged over scales and patches.
pub fn discriminator_loss_from(real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Tensor> {
    ensure!(real.len() == fake.len(), "scale count mismatch");
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            Ok((mean_all(&softplus(&r.logits.neg()?)?)? + mean_all(&softplus(&f.logits)?)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over(terms)
}

/// Non-saturating generator loss `−E[log D(fake)]`.
pub fn generator_adversarial_loss_from(fake: &[ScaleOutput]) -> Result<Tensor> {
    let terms = fake
        .iter()
        .map(|f| mean_all(&softplus(&f.logits.neg()?)?))
        .collect::<Result<Vec<_>>>()?;
    mean_over(terms)
}

/// Returns `(loss_D, loss_G_adv)`.
pub fn gan_losses(
    d: &dyn Discriminator,
    semantic: &Tensor,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<(Tensor, Tensor)> {
    ensure!(
        x_real.dims() == x_fake.dims(),
        "real and fake batches differ in shape"
    );
    let real = d.forward(semantic, x_real)?;
    let fake = d.forward(semantic, x_fake)?;
    Ok((
        discriminator_loss_from(&real, &fake)?,
        generator_adversarial_loss_from(&fake)?,
    ))
}

/// Per scale `Σ_i mean|D_i(real) − D_i(fake)|`, then averaged over scales.
/// Real-branch features are treated as constants.
pub fn feature_matching_from(real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Tensor> {
    ensure!(real.len() == fake.len(), "scale count mismatch");
    let mut per_scale = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        ensure!(
            r.features.len() == f.features.len(),
            "feature tap count mismatch"
        );
        let mut acc: Option<Tensor> = None;
        for (fr, ff) in r.features.iter().zip(&f.features) {
            let term = mean_all(&(ff - fr.detach())?.abs()?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        per_scale.push(
            acc.ok_or_else(|| Error::Validation("discriminator exposes no features".into()))?,
        );
    }
    mean_over(per_scale)
}

pub fn feature_matching_loss(
    d: &dyn Discriminator,
    semantic: &Tensor,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<Tensor> {
    ensure!(
        x_real.dims() == x_fake.dims(),
        "real and fake batches differ in shape"
    );
    feature_matching_from(&d.forward(semantic, x_real)?, &d.forward(semantic, x_fake)?)
}

/// `(1/P) Σ_i mean|FL_i(real) − FL_i(fake)|`.
pub fn perceptual_loss(
    p: &dyn FeatureExtractor,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<Tensor> {
    ensure!(
        x_real.dims() == x_fake.dims(),
        "real and fake batches differ in shape"
    );
    let fr = p.features(&x_real.detach())?;
    let ff = p.features(x_fake)?;
    ensure!(
        fr.len() == ff.len() && !fr.is_empty(),
        "extractor returned no taps"
    );
    let terms = fr
        .iter()
        .zip(&ff)
        .map(|(a, b)| mean_all(&(b - a.detach())?.abs()?))
        .collect::<Result<Vec<_>>>()?;
    mean_over(terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Feature matching.
    pub lambda1: f64,
    /// Perceptual.
    pub lambda2: f64,
    /// Edge detector.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                "{name} must be finite and >= 0, got {v}"
            );
        }
        Ok(())
    }
}

/// Scalar loss terms entering the image objective.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub adversarial: Tensor,
    pub feature_matching: Tensor,
    pub perceptual: Tensor,
    pub dned: Tensor,
}

/// `adv + λ1·fm + λ2·percep + λ3·dned`; fails on the first non-finite term.
pub fn cg2real_objective(parts: &LossParts, w: &LossWeights, step: usize) -> Result<Tensor> {
    for (name, t) in [
        ("loss_G_adv", &parts.adversarial),
        ("feature_matching", &parts.feature_matching),
        ("perceptual", &parts.perceptual),
        ("dned", &parts.dned),
    ] {
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                part: name,
                value: v,
            });
        }
    }
    let total = (&parts.adversarial
        + (&parts.feature_matching * w.lambda1)?
        + (&parts.perceptual * w.lambda2)?
        + (&parts.dned * w.lambda3)?)?;
    Ok(total)
}

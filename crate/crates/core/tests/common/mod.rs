//! Shared fixtures for the integration tests and the acceptance run.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sflow::dned::{dned_loss_tensor, sample_ensemble_weights};
use sflow::flow::FlowConfig;
use sflow::nn::{backward, scalar};
use sflow::synthesis::losses::{
    feature_matching_loss, generator_adversarial_loss_from, perceptual_loss,
};
use sflow::synthesis::{
    Discriminator, DiscriminatorConfig, MultiScaleDiscriminator, PerceptualExtractor,
};
use sflow::video::flow_loss_tensor;
use sflow::Result;

pub const FD_EPS: f64 = 1e-6;
pub const FD_COORDS: usize = 24;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Relative L2 error between the autodiff gradient of `f` at `x` and a
/// central finite difference, over `FD_COORDS` randomly chosen entries.
pub fn fd_relative_error(
    x: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
    seed: u64,
) -> Result<f64> {
    let var = Var::from_tensor(x)?;
    let loss = f(var.as_tensor())?;
    let grads = backward(&loss)?;
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .expect("input receives a gradient")
        .flatten_all()?
        .to_vec1()?;
    let base: Vec<f64> = x.flatten_all()?.to_vec1()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut num, mut den_a, mut den_f) = (0.0, 0.0, 0.0);
    for _ in 0..FD_COORDS.min(base.len()) {
        let i = rng.random_range(0..base.len());
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            scalar(&f(&Tensor::from_vec(v, x.dims(), x.device())?)?)
        };
        let fd = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS);
        num += (analytic[i] - fd).powi(2);
        den_a += analytic[i].powi(2);
        den_f += fd.powi(2);
    }
    Ok(num.sqrt() / den_a.sqrt().max(den_f.sqrt()).max(1e-12))
}

/// `(name, relative error)` for every differentiable loss, on 8×8 inputs.
pub fn gradient_suite() -> Result<Vec<(&'static str, f64)>> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();

    // Edge-detector ensemble loss w.r.t. the side-output probabilities.
    let target = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng)
        .ge(0.5)?
        .to_dtype(DType::F64)?;
    let weights = sample_ensemble_weights(2.0, 3)?;
    let sides = uniform(&[6, 1, 1, 8, 8], 0.05, 0.95, &mut rng);
    out.push((
        "dned_loss",
        fd_relative_error(
            &sides,
            |x| {
                let probs = (0..6)
                    .map(|i| x.get(i))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                dned_loss_tensor(&probs, &target, &weights, false)
            },
            1,
        )?,
    ));

    let d = MultiScaleDiscriminator::new(DiscriminatorConfig::new(3, 2), 5, DType::F64, &dev)?;
    let sem = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let real = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let fake = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    out.push((
        "gan_generator_loss",
        fd_relative_error(
            &fake,
            |x| generator_adversarial_loss_from(&d.forward(&sem, x)?),
            2,
        )?,
    ));
    out.push((
        "feature_matching_loss",
        fd_relative_error(&fake, |x| feature_matching_loss(&d, &sem, &real, x), 3)?,
    ));

    let p = PerceptualExtractor::random(9, DType::F64, &dev)?;
    out.push((
        "perceptual_loss",
        fd_relative_error(&fake, |x| perceptual_loss(&p, &real, x), 4)?,
    ));

    let cfg = FlowConfig::default();
    let x_t = uniform(&[1, 3, 8, 8], -0.8, 0.8, &mut rng);
    let x_t1 = uniform(&[1, 3, 8, 8], -0.8, 0.8, &mut rng);
    let f_t = uniform(&[1, 3, 8, 8], -0.8, 0.8, &mut rng);
    let f_t1 = uniform(&[1, 3, 8, 8], -0.8, 0.8, &mut rng);
    out.push((
        "flow_loss",
        fd_relative_error(&f_t1, |x| flow_loss_tensor(&x_t, &x_t1, &f_t, x, &cfg), 5)?,
    ));
    Ok(out)
}

//! Noise parameterization, preconditioning, the weighted denoising loss and
//! the deterministic Heun sampler for the probability-flow ODE.

use ndarray::{s, Array, Array4, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::guidance::{self, Guidance};
use crate::rng::{derive_seed, rng};
use crate::{Error, Result};

/// Sampler discretization plus the training-time σ distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 40,
            sigma_data: 1.2,
            p_mean: 0.0,
            p_std: 2.0,
        }
    }
}

impl NoiseSchedule {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.sigma_min > 0.0) {
            p.push(format!("sigma_min = {} must be positive", self.sigma_min));
        }
        if !(self.sigma_max > self.sigma_min) {
            p.push(format!("sigma_max = {} must exceed sigma_min = {}", self.sigma_max, self.sigma_min));
        }
        if !(self.rho > 0.0) {
            p.push(format!("rho = {} must be positive", self.rho));
        }
        if self.steps < 2 {
            p.push(format!("steps = {} must be at least 2", self.steps));
        }
        if !(self.sigma_data > 0.0) {
            p.push(format!("sigma_data = {} must be positive", self.sigma_data));
        }
        if !self.p_mean.is_finite() {
            p.push("p_mean must be finite".into());
        }
        if !(self.p_std >= 0.0) || !self.p_std.is_finite() {
            p.push(format!("p_std = {} must be nonnegative", self.p_std));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Scalars wrapping the raw network: `D = c_skip x + c_out F(c_in x; c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition_coeffs(sigma: f64, sigma_data: f64) -> Result<PreconditionCoeffs> {
    if !(sigma > 0.0) || !(sigma_data > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "preconditioning needs sigma > 0 and sigma_data > 0, got {sigma}, {sigma_data}"
        )));
    }
    let (s2, d2) = (sigma * sigma, sigma_data * sigma_data);
    let root = (s2 + d2).sqrt();
    Ok(PreconditionCoeffs {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / root,
        c_in: 1.0 / root,
        c_noise: sigma.ln() / 4.0,
    })
}

/// `λ(σ) = (σ² + σ_d²) / (σ σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// `x0 + σ n` with standard normal `n`.
pub fn add_noise<D: Dimension>(x0: &Array<f64, D>, sigma: f64, seed: u64) -> Result<Array<f64, D>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(x0.clone());
    }
    let mut r = rng(seed);
    Ok(x0.mapv(|v| v + sigma * r.sample::<f64, _>(StandardNormal)))
}

/// `σ = exp(z)`, `z ~ N(P_mean, P_std²)`.
pub fn sample_training_sigma(schedule: &NoiseSchedule, seed: u64) -> f64 {
    sample_training_sigmas(schedule, seed, 1)[0]
}

pub fn sample_training_sigmas(schedule: &NoiseSchedule, seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    if schedule.p_std == 0.0 {
        return vec![schedule.p_mean.exp(); n];
    }
    let dist = Normal::new(schedule.p_mean, schedule.p_std).expect("valid log-normal parameters");
    (0..n).map(|_| dist.sample(&mut r).exp()).collect()
}

/// Descending noise levels `σ_0 = σ_max, …, σ_{N-1} = σ_min`, then `0`.
pub fn karras_sigmas(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = schedule.steps;
    let inv = 1.0 / schedule.rho;
    let (a, b) = (schedule.sigma_max.powf(inv), schedule.sigma_min.powf(inv));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(schedule.rho))
        .collect();
    out[0] = schedule.sigma_max;
    out[n - 1] = schedule.sigma_min;
    out.push(0.0);
    Ok(out)
}

/// Monte-Carlo estimate of `E[λ(σ) ‖D(x0 + σn; σ) − x0‖²]`, one σ draw per
/// batch member, averaged over members and elements.
pub fn edm_loss<Dn: Denoiser + ?Sized>(
    denoiser: &Dn,
    x0: &Array4<f64>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let b = x0.dim().0;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sigmas = sample_training_sigmas(schedule, derive_seed(seed, u64::MAX), b);
    let mut total = 0.0;
    for (i, sigma) in sigmas.iter().enumerate() {
        let clean = x0.slice(s![i..i + 1, .., .., ..]).to_owned();
        let noisy = add_noise(&clean, *sigma, derive_seed(seed, i as u64))?;
        let d = denoiser.denoise(&noisy, *sigma)?;
        if d.dim() != clean.dim() {
            return Err(Error::shape(clean.dim(), d.dim()));
        }
        let mse = (&d - &clean).mapv(|v| v * v).mean().unwrap_or(0.0);
        total += loss_weight(*sigma, schedule.sigma_data) * mse;
    }
    Ok(total / b as f64)
}

/// Which evaluation of the drift a Heun step is asking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Predictor,
    Corrector,
    /// Euler step onto `σ = 0`.
    Final,
}

/// Integrates `dx/dσ = drift(x, σ)` along `sigmas` (descending, ending at 0)
/// with Heun's method, Euler on the last step.
pub fn heun_integrate<F>(sigmas: &[f64], mut x: Array4<f64>, mut drift: F) -> Result<Array4<f64>>
where
    F: FnMut(&Array4<f64>, f64, usize, Stage) -> Result<Array4<f64>>,
{
    if sigmas.len() < 2 {
        return Err(Error::InvalidArgument("need at least two noise levels".into()));
    }
    for i in 0..sigmas.len() - 1 {
        let (s0, s1) = (sigmas[i], sigmas[i + 1]);
        let h = s1 - s0;
        if s1 == 0.0 {
            let d = drift(&x, s0, i, Stage::Final)?;
            x.scaled_add(h, &d);
        } else {
            let d = drift(&x, s0, i, Stage::Predictor)?;
            let mut pred = x.clone();
            pred.scaled_add(h, &d);
            let d2 = drift(&pred, s1, i, Stage::Corrector)?;
            x.scaled_add(0.5 * h, &d);
            x.scaled_add(0.5 * h, &d2);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: i,
                context: format!("sampler state after stepping σ = {s0:.4e} → {s1:.4e}"),
            });
        }
    }
    Ok(x)
}

/// Prior PF-ODE drift `(x − D(x; σ)) / σ`.
pub fn prior_drift<Dn: Denoiser + ?Sized>(denoiser: &Dn, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
    let d = denoiser.denoise(x, sigma)?;
    Ok((x - &d) / sigma)
}

/// `σ_max n` with member `b` drawn from stream `derive_seed(seed, b)`.
pub fn initial_state(shape: (usize, usize, usize, usize), sigma_max: f64, seed: u64) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let mut x = Array4::zeros(shape);
    for i in 0..b {
        let mut r = rng(derive_seed(seed, i as u64));
        let member: Vec<f64> = (0..c * h * w)
            .map(|_| sigma_max * r.sample::<f64, _>(StandardNormal))
            .collect();
        x.slice_mut(s![i, .., .., ..])
            .assign(&ndarray::Array3::from_shape_vec((c, h, w), member).expect("member shape"));
    }
    x
}

/// Draws samples by integrating the probability-flow ODE from `σ_max` to 0.
/// With `guidance`, the drift inside both Heun stages is the posterior drift;
/// the final Euler step uses the prior drift.
pub fn pf_ode_sample<Dn: Denoiser + ?Sized>(
    denoiser: &Dn,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    seed: u64,
    guidance: Option<&Guidance<'_>>,
) -> Result<Array4<f64>> {
    let sigmas = karras_sigmas(schedule)?;
    if shape.1 != denoiser.channels() {
        return Err(Error::shape(denoiser.channels(), shape.1));
    }
    let x = initial_state(shape, schedule.sigma_max, seed);
    heun_integrate(&sigmas, x, |x, sigma, _, stage| match (guidance, stage) {
        (Some(g), Stage::Predictor | Stage::Corrector) => guidance::posterior_drift(x, sigma, g, denoiser),
        _ => prior_drift(denoiser, x, sigma),
    })
}

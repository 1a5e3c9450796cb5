//! Posterior sampling with a coarse measurement `y = M x + noise`: the
//! likelihood score taken through the denoised estimate, the guided drift,
//! guided ensembles, and exact Gaussian conditioning for verification.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, GaussianPrior};
use crate::edm::{heun_integrate, initial_state, karras_sigmas, NoiseSchedule, Stage};
use crate::grid::ResamplePair;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Measurement noise variance `Σ_y`.
    pub sigma_y: f64,
    /// Stability constant `Γ̂` in the effective variance `Σ_y + σ² Γ̂`.
    pub gamma_hat: f64,
    /// Guidance scale `λ_g`.
    pub lambda_g: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            sigma_y: 1e-4,
            gamma_hat: 0.01,
            lambda_g: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.sigma_y >= 0.0) {
            p.push(format!("sigma_y = {} must be nonnegative", self.sigma_y));
        }
        if !(self.gamma_hat >= 0.0) {
            p.push(format!("gamma_hat = {} must be nonnegative", self.gamma_hat));
        }
        if !self.lambda_g.is_finite() {
            p.push("lambda_g must be finite".into());
        }
        if self.sigma_y == 0.0 && self.gamma_hat == 0.0 {
            p.push("sigma_y and gamma_hat are both zero: effective variance vanishes".into());
        }
        p
    }

    pub fn effective_variance(&self, sigma: f64) -> Result<f64> {
        let v = self.sigma_y + sigma * sigma * self.gamma_hat;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "effective variance Σ_y + σ²Γ̂ = {v} at σ = {sigma}"
            )));
        }
        Ok(v)
    }
}

/// A measurement to condition on. `y` has shape `(1 | B, C, h, w)` on the
/// coarse grid of `pair`; a leading 1 is broadcast over the batch.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub pair: &'a ResamplePair,
    pub y: &'a Array4<f64>,
    pub config: GuidanceConfig,
}

impl<'a> Guidance<'a> {
    pub fn new(pair: &'a ResamplePair, y: &'a Array4<f64>, config: GuidanceConfig) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        let (_, _, h, w) = y.dim();
        if (h, w) != pair.coarse.shape() {
            return Err(Error::shape(pair.coarse.shape(), (h, w)));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("measurement contains non-finite values".into()));
        }
        Ok(Self { pair, y, config })
    }

    fn check_batch(&self, x: &Array4<f64>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if (h, w) != self.pair.fine.shape() || c != self.y.dim().1 {
            return Err(Error::shape((self.y.dim().1, self.pair.fine.shape()), (c, (h, w))));
        }
        if self.y.dim().0 != 1 && self.y.dim().0 != b {
            return Err(Error::shape(self.y.dim().0, b));
        }
        Ok(())
    }

    /// `y − M(field)` per member and channel.
    pub fn residual(&self, field: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_batch(field)?;
        let (b, c, _, _) = field.dim();
        let (h, w) = self.pair.coarse.shape();
        let mut out = Array4::zeros((b, c, h, w));
        for i in 0..b {
            for k in 0..c {
                let m = self.pair.coarsen(&field.slice(s![i, k, .., ..]))?;
                let y = self.y.slice(s![if self.y.dim().0 == 1 { 0 } else { i }, k, .., ..]);
                out.slice_mut(s![i, k, .., ..]).assign(&(&y - &m));
            }
        }
        Ok(out)
    }

    /// `‖y − M(field)‖` for each member.
    pub fn residual_norms(&self, field: &Array4<f64>) -> Result<Vec<f64>> {
        let r = self.residual(field)?;
        Ok(r.outer_iter().map(|m| m.mapv(|v| v * v).sum().sqrt()).collect())
    }

    fn adjoint(&self, coarse: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, _, _) = coarse.dim();
        let (h, w) = self.pair.fine.shape();
        let mut out = Array4::zeros((b, c, h, w));
        for i in 0..b {
            for k in 0..c {
                let f = self.pair.coarsen_adjoint(&coarse.slice(s![i, k, .., ..]))?;
                out.slice_mut(s![i, k, .., ..]).assign(&f);
            }
        }
        Ok(out)
    }
}

/// The bracketed objective `‖y − M D(x; σ)‖² / (Σ_y + σ² Γ̂)`, summed over
/// the batch.
pub fn likelihood_objective<Dn: Denoiser + ?Sized>(
    x: &Array4<f64>,
    sigma: f64,
    g: &Guidance<'_>,
    denoiser: &Dn,
) -> Result<f64> {
    let v = g.config.effective_variance(sigma)?;
    let d = denoiser.denoise(x, sigma)?;
    Ok(g.residual(&d)?.mapv(|r| r * r).sum() / v)
}

struct Evaluated {
    denoised: Array4<f64>,
    score: Array4<f64>,
    residual_norms: Vec<f64>,
}

fn evaluate<Dn: Denoiser + ?Sized>(x: &Array4<f64>, sigma: f64, g: &Guidance<'_>, denoiser: &Dn) -> Result<Evaluated> {
    g.check_batch(x)?;
    let v = g.config.effective_variance(sigma)?;
    let (denoised, pullback) = denoiser.denoise_with_pullback(x, sigma)?;
    let r = g.residual(&denoised)?;
    let residual_norms = r.outer_iter().map(|m| m.mapv(|v| v * v).sum().sqrt()).collect();
    let cot = g.adjoint(&r)? * (2.0 / v);
    let score = pullback(&cot)?;
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            context: format!("likelihood score at σ = {sigma:.4e} (effective variance {v:.3e})"),
        });
    }
    Ok(Evaluated {
        denoised,
        score,
        residual_norms,
    })
}

/// `s_l = −∇_x ‖y − M D(x; σ)‖² / (Σ_y + σ² Γ̂)`, differentiated through both
/// the denoiser and `M`.
pub fn likelihood_score<Dn: Denoiser + ?Sized>(
    x: &Array4<f64>,
    sigma: f64,
    g: &Guidance<'_>,
    denoiser: &Dn,
) -> Result<Array4<f64>> {
    Ok(evaluate(x, sigma, g, denoiser)?.score)
}

/// `d = (x − D(x; σ)) / σ − λ_g σ s_l`.
pub fn posterior_drift<Dn: Denoiser + ?Sized>(
    x: &Array4<f64>,
    sigma: f64,
    g: &Guidance<'_>,
    denoiser: &Dn,
) -> Result<Array4<f64>> {
    let e = evaluate(x, sigma, g, denoiser)?;
    Ok(guided(x, sigma, g, &e))
}

fn guided(x: &Array4<f64>, sigma: f64, g: &Guidance<'_>, e: &Evaluated) -> Array4<f64> {
    let mut d = (x - &e.denoised) / sigma;
    if g.config.lambda_g != 0.0 {
        d.scaled_add(-g.config.lambda_g * sigma, &e.score);
    }
    d
}

/// Residual `‖y − M D(x_σ; σ)‖` of every member at one predictor evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub sigma: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    /// `(n_ensemble, C, H, W)`.
    pub samples: Array4<f64>,
    /// `‖y − M x_final‖` per member.
    pub residuals: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

impl PosteriorEnsemble {
    pub fn mean(&self) -> Array4<f64> {
        self.samples.mean_axis(Axis(0)).expect("non-empty ensemble").insert_axis(Axis(0))
    }
}

/// Guided probability-flow sampling of `n_ensemble` members conditioned on
/// a single measurement (`y` with leading dimension 1).
pub fn posterior_sample<Dn: Denoiser + ?Sized>(
    denoiser: &Dn,
    schedule: &NoiseSchedule,
    g: &Guidance<'_>,
    seed: u64,
    n_ensemble: usize,
) -> Result<PosteriorEnsemble> {
    if n_ensemble == 0 {
        return Err(Error::InvalidArgument("ensemble size must be positive".into()));
    }
    if g.y.dim().0 != 1 {
        return Err(Error::shape(1, g.y.dim().0));
    }
    let sigmas = karras_sigmas(schedule)?;
    let (h, w) = g.pair.fine.shape();
    let shape = (n_ensemble, g.y.dim().1, h, w);
    if shape.1 != denoiser.channels() {
        return Err(Error::shape(denoiser.channels(), shape.1));
    }
    let x = initial_state(shape, schedule.sigma_max, seed);
    let mut trace = Vec::with_capacity(sigmas.len());
    let result = heun_integrate(&sigmas, x, |x, sigma, step, stage| {
        if stage == Stage::Final {
            let d = denoiser.denoise(x, sigma)?;
            trace.push(TraceEntry {
                step,
                sigma,
                residuals: g.residual_norms(&d)?,
            });
            return Ok((x - &d) / sigma);
        }
        let e = evaluate(x, sigma, g, denoiser).map_err(|err| match err {
            Error::NonFinite { context, .. } => Error::NonFinite { step, context },
            other => other,
        })?;
        if stage == Stage::Predictor {
            trace.push(TraceEntry {
                step,
                sigma,
                residuals: e.residual_norms.clone(),
            });
        }
        Ok(guided(x, sigma, g, &e))
    });
    let samples = result.map_err(|err| match err {
        Error::NonFinite { step, context } => Error::NonFinite {
            step,
            context: format!("{context}; guidance scale λ_g = {}", g.config.lambda_g),
        },
        other => other,
    })?;
    let residuals = g.residual_norms(&samples)?;
    Ok(PosteriorEnsemble {
        samples,
        residuals,
        trace,
    })
}

/// Median over members of the traced residual at each step.
pub fn median_residuals(trace: &[TraceEntry]) -> Vec<f64> {
    trace
        .iter()
        .map(|t| {
            let mut r = t.residuals.clone();
            r.sort_by(|a, b| a.total_cmp(b));
            let n = r.len();
            if n % 2 == 1 {
                r[n / 2]
            } else {
                0.5 * (r[n / 2 - 1] + r[n / 2])
            }
        })
        .collect()
}

/// Exact Gaussian posterior of a single-channel [`GaussianPrior`] observed
/// through block-mean coarsening with white noise of variance `Σ_y`.
#[derive(Debug, Clone)]
pub struct PosteriorOracle {
    pub prior: GaussianPrior,
    pub mean: Array2<f64>,
    /// `E|ẑ_k − E ẑ_k|²` for every unitary Fourier coefficient.
    pub mode_variances: Array2<f64>,
    pub sigma_y: f64,
}

pub fn exact_gaussian_posterior(
    prior: &GaussianPrior,
    pair: &ResamplePair,
    sigma_y: f64,
    y: &Array2<f64>,
) -> Result<PosteriorOracle> {
    if prior.shape() != pair.fine.shape() {
        return Err(Error::shape(pair.fine.shape(), prior.shape()));
    }
    if y.dim() != pair.coarse.shape() {
        return Err(Error::shape(pair.coarse.shape(), y.dim()));
    }
    if !(sigma_y >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_y = {sigma_y} must be nonnegative")));
    }
    let fft = prior.fft();
    let (hc, wc) = pair.coarse.shape();
    let (h, w) = pair.fine.shape();
    let m = hc * wc;
    let n = h * w;
    // A[k, j] = (F M_jᵀ)_k, and the columns of C Mᵀ
    let mut a_re = DMatrix::<f64>::zeros(n, m);
    let mut a_im = DMatrix::<f64>::zeros(n, m);
    let mut cmt = DMatrix::<f64>::zeros(n, m);
    let mut mcmt = DMatrix::<f64>::zeros(m, m);
    let mut e = Array2::<f64>::zeros((hc, wc));
    for j in 0..m {
        e.fill(0.0);
        e[[j / wc, j % wc]] = 1.0;
        let row = pair.coarsen_adjoint(&e.view())?;
        let mut z = fft.forward(&row);
        for (k, v) in z.iter().enumerate() {
            a_re[(k, j)] = v.re;
            a_im[(k, j)] = v.im;
        }
        z.zip_mut_with(&prior.variances, |v, c| *v *= *c);
        let col = fft.inverse_real(&z);
        for (k, v) in col.iter().enumerate() {
            cmt[(k, j)] = *v;
        }
        let mc = pair.coarsen(&col.view())?;
        for (i, v) in mc.iter().enumerate() {
            mcmt[(i, j)] = *v;
        }
    }
    let s_mat = {
        let mut s = mcmt;
        // symmetrize against round-off
        s = (&s + s.transpose()) * 0.5;
        for i in 0..m {
            s[(i, i)] += sigma_y;
        }
        s
    };
    let chol = match s_mat.clone().cholesky() {
        Some(c) => c,
        None => return Err(singular(&s_mat)),
    };
    let l = chol.l();
    let diag_max = l.diagonal().iter().cloned().fold(0.0f64, f64::max);
    let diag_min = l.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    if (diag_max / diag_min).powi(2) > 1e14 {
        return Err(singular(&s_mat));
    }
    let mu_c = pair.coarsen(&prior.mean.view())?;
    let innov = DVector::from_iterator(m, y.iter().zip(mu_c.iter()).map(|(a, b)| a - b));
    let gain = chol.solve(&innov);
    let update = &cmt * gain;
    let mean = Array2::from_shape_fn((h, w), |(i, j)| prior.mean[[i, j]] + update[i * w + j]);
    // v S⁻¹ vᴴ = |L⁻¹ vᵀ|² for the real and imaginary parts of each row of A
    let wr = l.solve_lower_triangular(&a_re.transpose()).expect("nonsingular factor");
    let wi = l.solve_lower_triangular(&a_im.transpose()).expect("nonsingular factor");
    let mode_variances = Array2::from_shape_fn((h, w), |(i, j)| {
        let k = i * w + j;
        let c = prior.variances[[i, j]];
        let q = wr.column(k).norm_squared() + wi.column(k).norm_squared();
        (c - c * c * q).max(0.0)
    });
    Ok(PosteriorOracle {
        prior: prior.clone(),
        mean,
        mode_variances,
        sigma_y,
    })
}

fn singular(s: &DMatrix<f64>) -> Error {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Error::Singular {
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
        context: "measurement covariance M C Mᵀ + Σ_y I".into(),
    }
}

/// Dense Gaussian conditioning of `x ~ N(μ, C)` on `y = M x + ε`,
/// `ε ~ N(0, Σ_y I)`. Returns the posterior mean and covariance.
pub fn gaussian_condition(
    cov: &DMatrix<f64>,
    mean: &DVector<f64>,
    m: &DMatrix<f64>,
    sigma_y: f64,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    if cov.ncols() != n || mean.len() != n || m.ncols() != n || y.len() != m.nrows() {
        return Err(Error::shape(
            (n, n, m.nrows()),
            (cov.shape(), mean.len(), m.shape(), y.len()),
        ));
    }
    let cmt = cov * m.transpose();
    let mut s = m * &cmt;
    for i in 0..s.nrows() {
        s[(i, i)] += sigma_y;
    }
    let chol = s.clone().cholesky().ok_or_else(|| singular(&s))?;
    let post_mean = mean + &cmt * chol.solve(&(y - m * mean));
    let post_cov = cov - &cmt * chol.solve(&cmt.transpose());
    Ok((post_mean, post_cov))
}

use ndarray::{s, Array2, Array4};
use num_complex::Complex64;

use super::{Denoiser, Pullback};
use crate::grid::Grid;
use crate::rng::derive_seed;
use crate::spectral::Fft2;
use crate::synthdata::{filtered_noise, SpectrumSpec};
use crate::{Error, Result};

/// Stationary Gaussian prior, diagonal in the 2-D Fourier basis.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    /// Variance of each unitary Fourier coefficient.
    pub variances: Array2<f64>,
    /// Mean field (physical space).
    pub mean: Array2<f64>,
    fft: Fft2,
}

impl GaussianPrior {
    pub fn new(variances: Array2<f64>, mean: Array2<f64>) -> Result<Self> {
        if variances.dim() != mean.dim() {
            return Err(Error::shape(variances.dim(), mean.dim()));
        }
        if variances.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument("mode variances must be finite and nonnegative".into()));
        }
        let (h, w) = variances.dim();
        for ((i, j), c) in variances.indexed_iter() {
            let (ci, cj) = crate::spectral::conjugate_index(i, j, h, w);
            if (c - variances[[ci, cj]]).abs() > 1e-12 * c.abs().max(1.0) {
                return Err(Error::InvalidArgument("mode variances are not conjugate-symmetric".into()));
            }
        }
        Ok(Self {
            fft: Fft2::new(h, w),
            variances,
            mean,
        })
    }

    /// Zero-mean prior with the power-law spectrum of `spec`.
    pub fn from_spectrum(grid: &Grid, spec: &SpectrumSpec) -> Result<Self> {
        let c = spec.mode_variances(grid)?;
        let mean = Array2::zeros(c.dim());
        Self::new(c, mean)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.variances.dim()
    }

    /// Pixel variance `Σ c_k / (H W)`.
    pub fn pixel_variance(&self) -> f64 {
        let (h, w) = self.shape();
        self.variances.sum() / (h * w) as f64
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// Applies `f(c_k)` as a Fourier multiplier to `x - offset`.
    fn filter<F: Fn(f64) -> f64>(&self, x: &Array2<f64>, f: F) -> Array2<f64> {
        let mut z = self.fft.forward(x);
        z.zip_mut_with(&self.variances, |v, c| *v *= f(*c));
        self.fft.inverse_real(&z)
    }

    /// `E[x0 | x]` for `x = x0 + σ n`, single field.
    pub fn posterior_mean_field(&self, x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        if sigma == 0.0 {
            return x.clone();
        }
        let s2 = sigma * sigma;
        let anomaly = x - &self.mean;
        self.filter(&anomaly, |c| c / (c + s2)) + &self.mean
    }

    /// Exact score `∇ log p_σ(x) = -(C + σ² I)^{-1} (x - μ)`. Requires
    /// `σ > 0` or a full-rank prior.
    pub fn score_field(&self, x: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let s2 = sigma * sigma;
        if s2 == 0.0 && self.variances.iter().any(|c| *c == 0.0) {
            return Err(Error::Degenerate("score of a rank-deficient prior at σ = 0".into()));
        }
        let anomaly = x - &self.mean;
        Ok(self.filter(&anomaly, |c| -1.0 / (c + s2)))
    }

    /// Log-density of `x` under `p_σ`, up to the normalizing constant.
    pub fn log_density_unnormalized(&self, x: &Array2<f64>, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let z = self.fft.forward(&(x - &self.mean));
        -0.5 * z
            .iter()
            .zip(self.variances.iter())
            .map(|(v, c)| v.norm_sqr() / (c + s2))
            .sum::<f64>()
    }

    /// One draw from the prior.
    pub fn sample(&self, seed: u64) -> Array2<f64> {
        filtered_noise(&self.fft, &self.variances.mapv(f64::sqrt), seed) + &self.mean
    }

    /// Fourier coefficients of a field (unitary).
    pub fn coefficients(&self, x: &Array2<f64>) -> Array2<Complex64> {
        self.fft.forward(x)
    }
}

/// `D(x; σ)` for a [`GaussianPrior`], applied independently to each channel.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub prior: GaussianPrior,
    pub channels: usize,
}

impl AnalyticGaussianDenoiser {
    pub fn new(prior: GaussianPrior) -> Self {
        Self { prior, channels: 1 }
    }

    pub fn with_channels(prior: GaussianPrior, channels: usize) -> Self {
        Self { prior, channels }
    }

    fn check(&self, x: &Array4<f64>, sigma: f64) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (h, w) != self.prior.shape() || c != self.channels {
            return Err(Error::shape((self.channels, self.prior.shape()), (c, (h, w))));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be nonnegative")));
        }
        Ok(())
    }

    fn apply<F: FnMut(&Array2<f64>) -> Array2<f64>>(x: &Array4<f64>, mut f: F) -> Array4<f64> {
        let mut out = Array4::zeros(x.dim());
        let (b, c, _, _) = x.dim();
        for i in 0..b {
            for k in 0..c {
                let field = x.slice(s![i, k, .., ..]).to_owned();
                out.slice_mut(s![i, k, .., ..]).assign(&f(&field));
            }
        }
        out
    }

    /// Exact score of the noisy marginal, batch version.
    pub fn score(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
        self.check(x, sigma)?;
        let mut err = None;
        let out = Self::apply(x, |f| match self.prior.score_field(f, sigma) {
            Ok(s) => s,
            Err(e) => {
                err = Some(e);
                Array2::zeros(f.dim())
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Independent draws from the prior, one stream per batch member.
    pub fn sample_prior(&self, n: usize, seed: u64) -> Array4<f64> {
        let (h, w) = self.prior.shape();
        let mut out = Array4::zeros((n, self.channels, h, w));
        for b in 0..n {
            for c in 0..self.channels {
                let s = derive_seed(derive_seed(seed, b as u64), c as u64);
                out.slice_mut(s![b, c, .., ..]).assign(&self.prior.sample(s));
            }
        }
        out
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn channels(&self) -> usize {
        self.channels
    }

    fn denoise(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
        self.check(x, sigma)?;
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        Ok(Self::apply(x, |f| self.prior.posterior_mean_field(f, sigma)))
    }

    fn denoise_with_pullback(&self, x: &Array4<f64>, sigma: f64) -> Result<(Array4<f64>, Pullback<'_>)> {
        let d = self.denoise(x, sigma)?;
        let s2 = sigma * sigma;
        let dim = d.dim();
        // The Jacobian is the symmetric shrinkage operator itself.
        let pullback: Pullback<'_> = Box::new(move |g: &Array4<f64>| {
            if g.dim() != dim {
                return Err(Error::shape(dim, g.dim()));
            }
            if s2 == 0.0 {
                return Ok(g.clone());
            }
            Ok(Self::apply(g, |f| self.prior.filter(f, |c| c / (c + s2))))
        });
        Ok((d, pullback))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normals;

    fn single_mode_prior() -> GaussianPrior {
        // only the (0, 1) mode and its conjugate carry variance 4
        let mut c = Array2::zeros((4, 8));
        c[[0, 1]] = 4.0;
        c[[0, 7]] = 4.0;
        GaussianPrior::new(c, Array2::zeros((4, 8))).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 3.0, k_min: 1, k_max: 8, amplitude: 1.0 };
        let d = AnalyticGaussianDenoiser::new(GaussianPrior::from_spectrum(&g, &spec).unwrap());
        let x = Array4::from_shape_vec((2, 1, 8, 16), normals(1, 256)).unwrap();
        assert_eq!(d.denoise(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn huge_sigma_returns_mean() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 1.0 };
        let mut prior = GaussianPrior::from_spectrum(&g, &spec).unwrap();
        prior.mean = Array2::from_shape_fn((8, 16), |(i, j)| 1.0 + 0.1 * (i + j) as f64);
        let cmax = prior.variances.iter().cloned().fold(0.0, f64::max);
        let d = AnalyticGaussianDenoiser::new(prior.clone());
        let x = Array4::from_shape_vec((1, 1, 8, 16), normals(2, 128)).unwrap();
        let out = d.denoise(&x, (1e6 * cmax).sqrt()).unwrap();
        for (a, m) in out.iter().zip(prior.mean.iter()) {
            assert!((a - m).abs() <= 1e-3 * m.abs());
        }
    }

    #[test]
    fn single_mode_shrinkage() {
        let prior = single_mode_prior();
        let fft = prior.fft().clone();
        // field whose (0,1) coefficient is 1 (and conjugate), nothing else
        let mut z = Array2::from_elem((4, 8), Complex64::new(0.0, 0.0));
        z[[0, 1]] = Complex64::new(1.0, 0.0);
        z[[0, 7]] = Complex64::new(1.0, 0.0);
        let x = fft.inverse_real(&z);
        let d = AnalyticGaussianDenoiser::new(prior);
        let x4 = x.clone().into_shape_with_order((1, 1, 4, 8)).unwrap();
        let out = d.denoise(&x4, 2.0).unwrap();
        let zo = fft.forward(&out.slice(s![0, 0, .., ..]).to_owned());
        assert!((zo[[0, 1]].re - 0.5).abs() < 1e-12);
        assert!(zo[[0, 1]].im.abs() < 1e-12);
        assert!(zo[[1, 1]].norm() < 1e-12);
    }

    #[test]
    fn tweedie_relation() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 1.3 };
        let d = AnalyticGaussianDenoiser::new(GaussianPrior::from_spectrum(&g, &spec).unwrap());
        for (k, sigma) in [0.05, 0.7, 3.0, 25.0].into_iter().enumerate() {
            let x = Array4::from_shape_vec((1, 1, 8, 16), normals(10 + k as u64, 128)).unwrap() * 2.0;
            let den = d.denoise(&x, sigma).unwrap();
            let lhs = (&x - &den) / (sigma * sigma);
            let score = d.score(&x, sigma).unwrap();
            let scale = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in lhs.iter().zip(score.iter()) {
                assert!((a + b).abs() <= 1e-8 * scale, "σ={sigma}: {a} vs {}", -b);
            }
        }
    }

    #[test]
    fn pullback_is_transpose() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 1.0 };
        let d = AnalyticGaussianDenoiser::new(GaussianPrior::from_spectrum(&g, &spec).unwrap());
        let x = Array4::from_shape_vec((1, 1, 8, 16), normals(3, 128)).unwrap();
        let u = Array4::from_shape_vec((1, 1, 8, 16), normals(4, 128)).unwrap();
        let v = Array4::from_shape_vec((1, 1, 8, 16), normals(5, 128)).unwrap();
        let (_, pb) = d.denoise_with_pullback(&x, 0.8).unwrap();
        // D is affine: <J u, v> = <u, J^T v>
        let ju = d.denoise(&(&x + &u), 0.8).unwrap() - d.denoise(&x, 0.8).unwrap();
        let jtv = pb(&v).unwrap();
        let lhs = (&ju * &v).sum();
        let rhs = (&u * &jtv).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_asymmetric_or_mismatched() {
        let mut c = Array2::zeros((4, 8));
        c[[0, 1]] = 1.0;
        assert!(GaussianPrior::new(c, Array2::zeros((4, 8))).is_err());
        let d = AnalyticGaussianDenoiser::new(single_mode_prior());
        assert!(d.denoise(&Array4::zeros((1, 1, 4, 6)), 1.0).is_err());
        assert!(d.denoise(&Array4::zeros((1, 1, 4, 8)), -1.0).is_err());
    }
}

//! Realizations of the denoiser `D(x; σ)`: the closed-form Gaussian
//! denoiser and a trainable preconditioned convolutional network.

mod analytic;
mod conv;

pub use analytic::{AnalyticGaussianDenoiser, GaussianPrior};
pub use conv::{
    conditional_input, train_denoiser, Conditioned, ConditioningMode, ConvDenoiser, ConvDenoiserConfig,
    TrainingData,
};

use ndarray::Array4;

use crate::Result;

/// Vector-Jacobian product of a denoiser evaluation: maps a cotangent on the
/// output to `J^T g` on the input.
pub type Pullback<'a> = Box<dyn FnOnce(&Array4<f64>) -> Result<Array4<f64>> + 'a>;

/// `D(x; σ)` on a batch `(B, C, H, W)` at a single noise level.
pub trait Denoiser {
    fn channels(&self) -> usize;

    fn denoise(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>>;

    /// Evaluates `D(x; σ)` and returns the pullback needed to differentiate
    /// scalar functions of the output with respect to `x`.
    fn denoise_with_pullback(&self, x: &Array4<f64>, sigma: f64) -> Result<(Array4<f64>, Pullback<'_>)>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn denoise(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
        (**self).denoise(x, sigma)
    }

    fn denoise_with_pullback(&self, x: &Array4<f64>, sigma: f64) -> Result<(Array4<f64>, Pullback<'_>)> {
        (**self).denoise_with_pullback(x, sigma)
    }
}

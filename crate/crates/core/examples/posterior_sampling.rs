//! Likelihood-guided sampling of a fine field from its block means, checked
//! against the exact Gaussian posterior.

use edm_downscale::denoisers::{AnalyticGaussianDenoiser, GaussianPrior};
use edm_downscale::edm::NoiseSchedule;
use edm_downscale::grid::weighted_mean;
use edm_downscale::guidance::{exact_gaussian_posterior, median_residuals, posterior_sample, Guidance, GuidanceConfig};
use edm_downscale::synthdata::SpectrumSpec;
use edm_downscale::ResamplePair;
use ndarray::{s, Array4};

fn main() -> edm_downscale::Result<()> {
    let pair = ResamplePair::new(16, 32, 2)?;
    let spec = SpectrumSpec {
        slope: 3.0,
        k_min: 1,
        k_max: 16,
        amplitude: 1.0,
    };
    let prior = GaussianPrior::from_spectrum(&pair.fine, &spec)?;
    let truth = prior.sample(1);
    let sigma_y = 0.01;
    let y2 = pair.coarsen(&truth.view())?;
    let y = y2.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));

    // λ_g = 0.5 removes the factor 2 of the guidance term at σ = 0
    let cfg = GuidanceConfig {
        sigma_y,
        gamma_hat: 0.25,
        lambda_g: 0.5,
    };
    let g = Guidance::new(&pair, &y, cfg)?;
    let den = AnalyticGaussianDenoiser::new(prior.clone());
    let ens = posterior_sample(&den, &NoiseSchedule::default(), &g, 2, 32)?;
    let oracle = exact_gaussian_posterior(&prior, &pair, sigma_y, &y2)?;

    let mean: Array4<f64> = ens.mean();
    let err = &mean.slice(s![0, 0, .., ..]) - &oracle.mean;
    let rel = weighted_mean(&err.mapv(|v| v * v).view(), &pair.fine)?.sqrt() / prior.pixel_variance().sqrt();
    println!("ensemble mean vs exact posterior mean: {rel:.3} prior std");
    let med = median_residuals(&ens.trace);
    println!("median residual |y - M D| first {:.3} last {:.3}", med[0], med[med.len() - 1]);
    println!("final residual per member {:?}", &ens.residuals[..4]);
    Ok(())
}

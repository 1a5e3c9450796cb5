//! Diffusion-based downscaling of coarse gridded climate fields.
//!
//! The crate is organised around the pieces of a downscaling experiment:
//!
//! - [`grid`]: lat-lon raster geometry, quadrature weights, block-mean
//!   coarsening and periodic bicubic upsampling.
//! - [`synthdata`]: Gaussian random fields with power-law spectra, paired
//!   coarse/fine datasets, normalization and the imperfect-input perturbation.
//! - [`edm`]: noise parameterization, preconditioning, the weighted denoising
//!   loss and the Heun probability-flow ODE sampler.
//! - [`denoisers`]: the exact Gaussian denoiser and a trainable residual
//!   encoder-decoder with concatenation conditioning.
//! - [`guidance`]: likelihood-score guidance for posterior sampling and the
//!   exact Gaussian posterior used to check it.
//! - [`baselines`]: bicubic and L1-regressor super-resolution.
//! - [`diagnostics`]: weighted RMSE, temporal STD, zonal climatology and
//!   spectra, PDFs, EOFs and regional crops.
//! - [`bundle`], [`config`], [`pipeline`]: array persistence, experiment
//!   configuration and the `gen-data → train → sample → evaluate` chain used
//!   by the command-line tool.

pub mod baselines;
pub mod bundle;
pub mod config;
pub mod denoisers;
pub mod diagnostics;
pub mod edm;
mod error;
pub mod grid;
pub mod guidance;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synthdata;

pub use error::{Error, Result};
pub use grid::{Grid, ResamplePair};
pub use synthdata::FieldSet;

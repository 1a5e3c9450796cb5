//! Unitary 2-D discrete Fourier transforms on lat × lon rasters and the
//! integer wavenumber bookkeeping shared by the synthetic-data generator, the
//! Gaussian prior and the diagnostics.
//!
//! Both directions are scaled by `1/sqrt(n_lat * n_lon)`, so a field of
//! independent unit-variance values has unit-variance Fourier coefficients.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached plans for one raster shape.
#[derive(Clone)]
pub struct Fft2 {
    n_lat: usize,
    n_lon: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.n_lat, self.n_lon)
    }
}

impl Fft2 {
    pub fn new(n_lat: usize, n_lon: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_lat,
            n_lon,
            row_fwd: planner.plan_fft_forward(n_lon),
            row_inv: planner.plan_fft_inverse(n_lon),
            col_fwd: planner.plan_fft_forward(n_lat),
            col_inv: planner.plan_fft_inverse(n_lat),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn forward(&self, field: &Array2<f64>) -> Array2<Complex64> {
        let mut z = field.mapv(|v| Complex64::new(v, 0.0));
        self.transform(&mut z, false);
        z
    }

    pub fn forward_complex(&self, z: &mut Array2<Complex64>) {
        self.transform(z, false);
    }

    /// Inverse transform keeping the real part. Callers are expected to pass
    /// Hermitian-symmetric spectra.
    pub fn inverse_real(&self, spectrum: &Array2<Complex64>) -> Array2<f64> {
        let mut z = spectrum.clone();
        self.transform(&mut z, true);
        z.mapv(|c| c.re)
    }

    pub fn inverse_complex(&self, z: &mut Array2<Complex64>) {
        self.transform(z, true);
    }

    fn transform(&self, z: &mut Array2<Complex64>, inverse: bool) {
        assert_eq!(z.dim(), (self.n_lat, self.n_lon), "fft shape");
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_lon.max(self.n_lat)];
        for mut r in z.axis_iter_mut(Axis(0)) {
            let b = &mut buf[..self.n_lon];
            for (dst, src) in b.iter_mut().zip(r.iter()) {
                *dst = *src;
            }
            row.process(b);
            for (dst, src) in r.iter_mut().zip(b.iter()) {
                *dst = *src;
            }
        }
        for mut c in z.axis_iter_mut(Axis(1)) {
            let b = &mut buf[..self.n_lat];
            for (dst, src) in b.iter_mut().zip(c.iter()) {
                *dst = *src;
            }
            col.process(b);
            for (dst, src) in c.iter_mut().zip(b.iter()) {
                *dst = *src;
            }
        }
        let scale = 1.0 / ((self.n_lat * self.n_lon) as f64).sqrt();
        z.mapv_inplace(|c| c * scale);
    }
}

/// Signed integer frequency of DFT bin `i` out of `n` (numpy `fftfreq * n`).
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Isotropic wavenumber of every 2-D mode, measured in zonal-wavenumber
/// units. Latitude harmonics span 180° rather than 360°, so a meridional
/// frequency `ky` counts as `ky * 360 / lat_span`.
pub fn isotropic_wavenumbers(n_lat: usize, n_lon: usize, lat_span_deg: f64) -> Array2<f64> {
    let stretch = 360.0 / lat_span_deg;
    Array2::from_shape_fn((n_lat, n_lon), |(i, j)| {
        let ky = signed_freq(i, n_lat) as f64 * stretch;
        let kx = signed_freq(j, n_lon) as f64;
        (kx * kx + ky * ky).sqrt()
    })
}

/// Index of the conjugate partner of mode `(i, j)`.
pub fn conjugate_index(i: usize, j: usize, n_lat: usize, n_lon: usize) -> (usize, usize) {
    ((n_lat - i) % n_lat, (n_lon - j) % n_lon)
}

/// One-sided zonal power of a single real row: `|X_0|^2`, `2|X_k|^2` for
/// `0 < k < n/2` and `|X_{n/2}|^2`, with `X` the DFT scaled by `1/n`. The
/// entries sum to the mean square of the row.
pub fn zonal_power_row(planner: &Arc<dyn Fft<f64>>, row: &[f64]) -> Vec<f64> {
    let n = row.len();
    let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.process(&mut buf);
    let inv_n = 1.0 / n as f64;
    (0..=n / 2)
        .map(|k| {
            let p = (buf[k] * inv_n).norm_sqr();
            if k == 0 || 2 * k == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

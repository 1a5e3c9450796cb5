//! Lat-lon raster geometry and the two resolution-change operators used
//! throughout: block-mean coarsening (the measurement operator) and separable
//! Catmull-Rom bicubic upsampling.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cell-centred lat-lon raster with per-row quadrature weights.
///
/// Latitudes run north to south. Row weights are normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_centers: Vec<f64>,
    pub lon_centers: Vec<f64>,
    pub row_weights: Vec<f64>,
    /// False only for regional crops, which do not wrap in longitude.
    pub lon_periodic: bool,
}

impl Grid {
    /// Equiangular global grid with `cos(lat)` row weights.
    pub fn latlon(n_lat: usize, n_lon: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if n_lat < 2 {
            problems.push(format!("n_lat = {n_lat} must be at least 2"));
        }
        if n_lon < 4 {
            problems.push(format!("n_lon = {n_lon} must be at least 4"));
        }
        if n_lon % 2 != 0 {
            problems.push(format!("n_lon = {n_lon} must be even"));
        }
        if !problems.is_empty() {
            return Err(Error::GridSize(problems.join("; ")));
        }
        let dlat = 180.0 / n_lat as f64;
        let dlon = 360.0 / n_lon as f64;
        let lat_centers: Vec<f64> = (0..n_lat).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect();
        let lon_centers: Vec<f64> = (0..n_lon).map(|j| (j as f64 + 0.5) * dlon).collect();
        let raw: Vec<f64> = lat_centers.iter().map(|l| l.to_radians().cos()).collect();
        Ok(Self {
            n_lat,
            n_lon,
            lat_centers,
            lon_centers,
            row_weights: normalized(&raw),
            lon_periodic: true,
        })
    }

    /// Builds a grid from explicit coordinates; weights are renormalized.
    pub fn from_parts(
        lat_centers: Vec<f64>,
        lon_centers: Vec<f64>,
        row_weights: &[f64],
        lon_periodic: bool,
    ) -> Result<Self> {
        if lat_centers.is_empty() || lon_centers.is_empty() {
            return Err(Error::GridSize("empty coordinate axis".into()));
        }
        if row_weights.len() != lat_centers.len() {
            return Err(Error::shape(lat_centers.len(), row_weights.len()));
        }
        if row_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("row weights must be positive".into()));
        }
        Ok(Self {
            n_lat: lat_centers.len(),
            n_lon: lon_centers.len(),
            lat_centers,
            lon_centers,
            row_weights: normalized(row_weights),
            lon_periodic,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn lat_spacing(&self) -> f64 {
        if self.n_lat < 2 {
            return 180.0;
        }
        (self.lat_centers[0] - self.lat_centers[1]).abs()
    }

    /// Meridional extent covered by the rows.
    pub fn lat_span(&self) -> f64 {
        self.lat_spacing() * self.n_lat as f64
    }

    pub fn check_field(&self, field: &ArrayView2<f64>) -> Result<()> {
        if field.dim() != self.shape() {
            return Err(Error::shape(self.shape(), field.dim()));
        }
        Ok(())
    }
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// A fine grid and its exact integer coarsening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePair {
    pub fine: Grid,
    pub coarse: Grid,
    pub factor: usize,
}

impl ResamplePair {
    pub fn new(n_lat_fine: usize, n_lon_fine: usize, factor: usize) -> Result<Self> {
        if factor == 0 || n_lat_fine % factor != 0 || n_lon_fine % factor != 0 {
            return Err(Error::GridSize(format!(
                "{n_lat_fine}x{n_lon_fine} is not divisible by factor {factor}"
            )));
        }
        let fine = Grid::latlon(n_lat_fine, n_lon_fine)?;
        let coarse = Grid::latlon(n_lat_fine / factor, n_lon_fine / factor)?;
        Ok(Self { fine, coarse, factor })
    }

    /// Fine-row weights of each coarse block, summed.
    fn block_weight_sums(&self) -> Vec<f64> {
        self.fine
            .row_weights
            .chunks(self.factor)
            .map(|c| c.iter().sum())
            .collect()
    }

    /// Weighted block mean. Linear, so it doubles as the measurement operator.
    pub fn coarsen(&self, field: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.fine.check_field(field)?;
        let f = self.factor;
        let sums = self.block_weight_sums();
        let w = &self.fine.row_weights;
        let mut out = Array2::<f64>::zeros(self.coarse.shape());
        for ((ci, cj), v) in out.indexed_iter_mut() {
            let mut acc = 0.0;
            for i in ci * f..(ci + 1) * f {
                let mut row = 0.0;
                for j in cj * f..(cj + 1) * f {
                    row += field[[i, j]];
                }
                acc += w[i] * row;
            }
            *v = acc / (f as f64 * sums[ci]);
        }
        Ok(out)
    }

    /// Transpose of [`coarsen`](Self::coarsen) under the plain Euclidean inner
    /// product on both grids.
    pub fn coarsen_adjoint(&self, coarse: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.coarse.check_field(coarse)?;
        let f = self.factor;
        let sums = self.block_weight_sums();
        let w = &self.fine.row_weights;
        Ok(Array2::from_shape_fn(self.fine.shape(), |(i, j)| {
            let ci = i / f;
            coarse[[ci, j / f]] * w[i] / (f as f64 * sums[ci])
        }))
    }

    /// Catmull-Rom bicubic interpolation to the fine grid: periodic in
    /// longitude, edge-clamped in latitude.
    pub fn bicubic_upsample(&self, coarse: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.coarse.check_field(coarse)?;
        let lat_taps = taps(self.fine.n_lat, self.coarse.n_lat, self.factor, false);
        let lon_taps = taps(self.fine.n_lon, self.coarse.n_lon, self.factor, true);
        // longitude pass: coarse rows -> fine columns
        let mut tmp = Array2::<f64>::zeros((self.coarse.n_lat, self.fine.n_lon));
        for ci in 0..self.coarse.n_lat {
            for (j, t) in lon_taps.iter().enumerate() {
                tmp[[ci, j]] = t.iter().map(|&(k, w)| w * coarse[[ci, k]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros(self.fine.shape());
        for (i, t) in lat_taps.iter().enumerate() {
            for j in 0..self.fine.n_lon {
                out[[i, j]] = t.iter().map(|&(k, w)| w * tmp[[k, j]]).sum();
            }
        }
        Ok(out)
    }
}

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap stencil for every fine index along one axis.
fn taps(n_fine: usize, n_coarse: usize, factor: usize, periodic: bool) -> Vec<[(usize, f64); 4]> {
    (0..n_fine)
        .map(|i| {
            let u = (i as f64 + 0.5) / factor as f64 - 0.5;
            let base = u.floor();
            let t = u - base;
            let base = base as i64;
            let mut out = [(0usize, 0.0f64); 4];
            for (slot, off) in (-1i64..=2).enumerate() {
                let k = base + off;
                let idx = if periodic {
                    k.rem_euclid(n_coarse as i64) as usize
                } else {
                    k.clamp(0, n_coarse as i64 - 1) as usize
                };
                out[slot] = (idx, cubic_kernel(t - off as f64));
            }
            out
        })
        .collect()
}

/// Area-weighted mean `Σ w_i f_ij / (n_lon Σ w_i)`.
pub fn weighted_mean(field: &ArrayView2<f64>, grid: &Grid) -> Result<f64> {
    grid.check_field(field)?;
    let wsum: f64 = grid.row_weights.iter().sum();
    let acc: f64 = field
        .outer_iter()
        .zip(&grid.row_weights)
        .map(|(row, w)| w * row.sum())
        .sum();
    Ok(acc / (grid.n_lon as f64 * wsum))
}

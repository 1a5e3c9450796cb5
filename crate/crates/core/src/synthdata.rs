//! Synthetic multiscale fields standing in for reanalysis data, paired
//! coarse/fine datasets, per-channel normalization (with a log transform for
//! precipitation-like channels) and the imperfect-input perturbation.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::{Grid, ResamplePair};
use crate::rng::{derive_seed, rng};
use crate::spectral::{isotropic_wavenumbers, Fft2};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub units: String,
    /// Nonnegative, heavy-tailed channel normalized through `log(1 + x/ε)`.
    pub precip_like: bool,
}

impl ChannelMeta {
    pub fn new(name: impl Into<String>, units: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            units: units.into(),
            precip_like: false,
        }
    }

    pub fn precip(name: impl Into<String>, units: impl Into<String>) -> Self {
        Self {
            precip_like: true,
            ..Self::new(name, units)
        }
    }
}

/// `time × channel × lat × lon` values on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub data: Array4<f64>,
    pub channels: Vec<ChannelMeta>,
    pub grid: Grid,
    pub time_step_hours: f64,
}

impl FieldSet {
    pub fn new(data: Array4<f64>, channels: Vec<ChannelMeta>, grid: Grid) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c == 0 || c != channels.len() {
            return Err(Error::shape(channels.len(), c));
        }
        if (h, w) != grid.shape() {
            return Err(Error::shape(grid.shape(), (h, w)));
        }
        Ok(Self {
            data,
            channels,
            grid,
            time_step_hours: 6.0,
        })
    }

    pub fn n_time(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn slice(&self, t: usize, c: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![t, c, .., ..])
    }

    pub fn slice_mut(&mut self, t: usize, c: usize) -> ArrayViewMut2<'_, f64> {
        self.data.slice_mut(s![t, c, .., ..])
    }

    /// Single-channel view as its own `FieldSet`.
    pub fn channel(&self, c: usize) -> FieldSet {
        FieldSet {
            data: self.data.slice(s![.., c..c + 1, .., ..]).to_owned(),
            channels: vec![self.channels[c].clone()],
            grid: self.grid.clone(),
            time_step_hours: self.time_step_hours,
        }
    }

    pub fn select_times(&self, idx: &[usize]) -> FieldSet {
        FieldSet {
            data: self.data.select(Axis(0), idx),
            ..self.clone_meta()
        }
    }

    /// Same metadata, new data (shape must match the grid and channels).
    pub fn with_data(&self, data: Array4<f64>) -> Result<FieldSet> {
        let mut out = FieldSet::new(data, self.channels.clone(), self.grid.clone())?;
        out.time_step_hours = self.time_step_hours;
        Ok(out)
    }

    fn clone_meta(&self) -> FieldSet {
        FieldSet {
            data: Array4::zeros((0, self.n_channels(), self.grid.n_lat, self.grid.n_lon)),
            channels: self.channels.clone(),
            grid: self.grid.clone(),
            time_step_hours: self.time_step_hours,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: pos,
                context: "field set contains NaN/Inf".into(),
            });
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &FieldSet) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::shape(self.data.dim(), other.data.dim()));
        }
        Ok(())
    }

    /// Concatenates along time.
    pub fn concat_time(parts: &[FieldSet]) -> Result<FieldSet> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no parts to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        first.with_data(data)
    }
}

/// Isotropic power-law spectrum for [`generate_grf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    /// Power per mode falls off as `k^-slope`.
    pub slope: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Pixel standard deviation of the generated field.
    pub amplitude: f64,
}

impl SpectrumSpec {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.slope > 0.0) {
            problems.push(format!("slope {} must be positive", self.slope));
        }
        if self.k_min < 1 || self.k_min >= self.k_max {
            problems.push(format!("band [{}, {}] must satisfy 1 <= k_min < k_max", self.k_min, self.k_max));
        }
        if self.k_max > grid.n_lon / 2 {
            problems.push(format!("k_max {} exceeds the Nyquist wavenumber {}", self.k_max, grid.n_lon / 2));
        }
        if !(self.amplitude > 0.0) {
            problems.push(format!("amplitude {} must be positive", self.amplitude));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Variance of each 2-D Fourier mode (unitary convention), scaled so the
    /// pixel variance equals `amplitude²`.
    pub fn mode_variances(&self, grid: &Grid) -> Result<Array2<f64>> {
        self.validate(grid)?;
        let k = isotropic_wavenumbers(grid.n_lat, grid.n_lon, grid.lat_span());
        let (lo, hi) = (self.k_min as f64, self.k_max as f64);
        let mut c = k.mapv(|k| if k >= lo && k <= hi { k.powf(-self.slope) } else { 0.0 });
        let total = c.sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("spectral band contains no modes".into()));
        }
        let n = (grid.n_lat * grid.n_lon) as f64;
        c *= self.amplitude * self.amplitude * n / total;
        Ok(c)
    }
}

/// Draws one field with the given per-mode variances (white noise filtered in
/// Fourier space).
pub(crate) fn filtered_noise(fft: &Fft2, sqrt_var: &Array2<f64>, seed: u64) -> Array2<f64> {
    let (h, w) = fft.shape();
    let mut r = rng(seed);
    let white = Array2::from_shape_simple_fn((h, w), || StandardNormal.sample(&mut r));
    let mut z = fft.forward(&white);
    z.zip_mut_with(sqrt_var, |c, s| *c *= *s);
    fft.inverse_real(&z)
}

/// Zero-mean Gaussian random fields, one independent slice per time step.
/// Slice `t` depends only on `(seed, t)`.
pub fn generate_grf(grid: &Grid, spec: &SpectrumSpec, seed: u64, n_time: usize) -> Result<FieldSet> {
    let sqrt_var = spec.mode_variances(grid)?.mapv(f64::sqrt);
    let fft = Fft2::new(grid.n_lat, grid.n_lon);
    let mut data = Array4::zeros((n_time, 1, grid.n_lat, grid.n_lon));
    for t in 0..n_time {
        let field = filtered_noise(&fft, &sqrt_var, derive_seed(seed, t as u64));
        data.slice_mut(s![t, 0, .., ..]).assign(&field);
    }
    FieldSet::new(data, vec![ChannelMeta::new("grf", "1")], grid.clone())
}

/// `max(x - threshold, 0)`, a sparse nonnegative channel.
pub fn make_precip_like(field: &Array3<f64>, threshold: f64) -> Array3<f64> {
    field.mapv(|v| (v - threshold).max(0.0))
}

/// Clamps negative values of precipitation-like channels to zero and returns
/// how many were clamped.
pub fn clamp_negative_precip(fields: &mut FieldSet) -> usize {
    let mut count = 0;
    for c in 0..fields.n_channels() {
        if !fields.channels[c].precip_like {
            continue;
        }
        fields.data.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| {
            if v < 0.0 {
                count += 1;
                0.0
            } else {
                v
            }
        });
    }
    count
}

/// Per-channel normalization statistics, frozen from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `ε` of `log(1 + x/ε)` for precipitation-like channels, `None` otherwise.
    pub log_offset: Vec<Option<f64>>,
}

impl NormStats {
    /// Fits statistics; `ε` defaults to `offset_fraction` times the channel's
    /// physical standard deviation.
    pub fn fit(fields: &FieldSet, offset_fraction: f64) -> Result<Self> {
        let nc = fields.n_channels();
        let mut out = NormStats {
            mean: vec![0.0; nc],
            std: vec![1.0; nc],
            log_offset: vec![None; nc],
        };
        for c in 0..nc {
            let view = fields.data.slice(s![.., c, .., ..]);
            let values: Vec<f64> = if fields.channels[c].precip_like {
                if view.iter().any(|v| *v < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "channel {} has negative precipitation",
                        fields.channels[c].name
                    )));
                }
                let (_, sd) = mean_std(view.iter().copied());
                let eps = (offset_fraction * sd).max(1e-12);
                out.log_offset[c] = Some(eps);
                view.iter().map(|v| (v / eps).ln_1p()).collect()
            } else {
                view.iter().copied().collect()
            };
            let (m, sd) = mean_std(values.into_iter());
            out.mean[c] = m;
            out.std[c] = if sd > 0.0 { sd } else { 1.0 };
        }
        Ok(out)
    }

    pub fn identity(n_channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
            log_offset: vec![None; n_channels],
        }
    }

    fn check(&self, fields: &FieldSet) -> Result<()> {
        let nc = fields.n_channels();
        if self.mean.len() != nc || self.std.len() != nc || self.log_offset.len() != nc {
            return Err(Error::shape(nc, self.mean.len()));
        }
        if let Some(c) = self.std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("std of channel {c} is not positive")));
        }
        if let Some(c) = self.log_offset.iter().position(|e| matches!(e, Some(e) if !(*e > 0.0))) {
            return Err(Error::InvalidArgument(format!("log offset of channel {c} is not positive")));
        }
        Ok(())
    }

    pub fn normalize(&self, fields: &FieldSet) -> Result<FieldSet> {
        self.check(fields)?;
        let mut out = fields.clone();
        for c in 0..fields.n_channels() {
            let (m, sd) = (self.mean[c], self.std[c]);
            let mut view = out.data.slice_mut(s![.., c, .., ..]);
            match self.log_offset[c] {
                Some(eps) => {
                    if view.iter().any(|v| *v < 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "negative value in precipitation channel {}",
                            fields.channels[c].name
                        )));
                    }
                    view.mapv_inplace(|v| ((v / eps).ln_1p() - m) / sd);
                }
                None => view.mapv_inplace(|v| (v - m) / sd),
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, fields: &FieldSet) -> Result<FieldSet> {
        self.check(fields)?;
        let mut out = fields.clone();
        for c in 0..fields.n_channels() {
            let (m, sd) = (self.mean[c], self.std[c]);
            let mut view = out.data.slice_mut(s![.., c, .., ..]);
            match self.log_offset[c] {
                Some(eps) => view.mapv_inplace(|v| eps * (v * sd + m).exp_m1()),
                None => view.mapv_inplace(|v| v * sd + m),
            }
        }
        Ok(out)
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    (mean, (m2 / n).sqrt())
}

/// Coarsens every slice of a fine dataset. Returns `(coarse, fine)`.
pub fn build_pairs(fine: &FieldSet, pair: &ResamplePair) -> Result<(FieldSet, FieldSet)> {
    if fine.grid.shape() != pair.fine.shape() {
        return Err(Error::shape(pair.fine.shape(), fine.grid.shape()));
    }
    let coarse = map_slices(fine, &pair.coarse, |v| pair.coarsen(&v))?;
    Ok((coarse, fine.clone()))
}

/// Applies a per-slice map from one grid to another.
pub fn map_slices<F>(fields: &FieldSet, target: &Grid, mut f: F) -> Result<FieldSet>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    let (nt, nc, _, _) = fields.data.dim();
    let mut data = Array4::zeros((nt, nc, target.n_lat, target.n_lon));
    for t in 0..nt {
        for c in 0..nc {
            data.slice_mut(s![t, c, .., ..]).assign(&f(fields.slice(t, c))?);
        }
    }
    let mut out = FieldSet::new(data, fields.channels.clone(), target.clone())?;
    out.time_step_hours = fields.time_step_hours;
    Ok(out)
}

/// Wavenumber-dependent amplitude damping used to mimic emulator drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Damping {
    None,
    /// Multiply amplitudes with isotropic wavenumber above `k0` by `factor`.
    Step { k0: f64, factor: f64 },
    /// `exp(-(k / scale)^2)`.
    Gaussian { scale: f64 },
}

impl Damping {
    pub fn factor(&self, k: f64) -> f64 {
        match *self {
            Damping::None => 1.0,
            Damping::Step { k0, factor } => {
                if k > k0 {
                    factor
                } else {
                    1.0
                }
            }
            Damping::Gaussian { scale } => (-(k / scale).powi(2)).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub damping: Damping,
    pub bias: f64,
    pub noise_std: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            damping: Damping::None,
            bias: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Spectral damping, constant bias and white noise applied to every slice of
/// a coarse dataset. The mean (wavenumber 0) is left to the bias term.
pub fn perturb_imperfect(coarse: &FieldSet, p: &Perturbation, seed: u64) -> Result<FieldSet> {
    perturb_imperfect_with(coarse, |k| p.damping.factor(k), p.bias, p.noise_std, seed)
}

pub fn perturb_imperfect_with<D>(coarse: &FieldSet, damping: D, bias: f64, noise_std: f64, seed: u64) -> Result<FieldSet>
where
    D: Fn(f64) -> f64,
{
    let grid = &coarse.grid;
    let kgrid = isotropic_wavenumbers(grid.n_lat, grid.n_lon, grid.lat_span());
    let factors = kgrid.mapv(|k| if k == 0.0 { 1.0 } else { damping(k) });
    if let Some(bad) = factors.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::InvalidArgument(format!("damping factor {bad} outside (0, 1]")));
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
    }
    let identity = factors.iter().all(|d| *d == 1.0);
    let fft = Fft2::new(grid.n_lat, grid.n_lon);
    let mut out = coarse.clone();
    let (nt, nc, h, w) = coarse.data.dim();
    for t in 0..nt {
        for c in 0..nc {
            let mut field = if identity {
                coarse.slice(t, c).to_owned()
            } else {
                let mut z = fft.forward(&coarse.slice(t, c).to_owned());
                z.zip_mut_with(&factors, |v, d| *v *= *d);
                fft.inverse_real(&z)
            };
            field += bias;
            if noise_std > 0.0 {
                let mut r = rng(derive_seed(seed, (t * nc + c) as u64));
                field.mapv_inplace(|v| {
                    let n: f64 = StandardNormal.sample(&mut r);
                    v + noise_std * n
                });
            }
            debug_assert_eq!(field.dim(), (h, w));
            out.slice_mut(t, c).assign(&field);
        }
    }
    Ok(out)
}

/// Configuration of one synthetic climate channel: latitude-dependent
/// background, an imprint of the static forcing and GRF weather noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub units: String,
    pub spectrum: SpectrumSpec,
    /// Amplitude of a `cos(2·lat)` background climatology.
    pub background: f64,
    /// Coefficient on the (unit-variance) static forcing field.
    pub forcing_coupling: f64,
    /// When set, the channel is `max(x - threshold, 0)` and precipitation-like.
    pub precip_threshold: Option<f64>,
}

/// Parameters of the smooth random field used as an orography stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForcingSpec {
    pub slope: f64,
    pub seed: u64,
}

impl Default for ForcingSpec {
    fn default() -> Self {
        Self { slope: 2.5, seed: 0x0A0B }
    }
}

/// Fixed unit-variance random field playing the role of orography.
pub fn static_forcing(grid: &Grid, spec: &ForcingSpec) -> Result<Array2<f64>> {
    let s = SpectrumSpec {
        slope: spec.slope,
        k_min: 1,
        k_max: grid.n_lon / 2,
        amplitude: 1.0,
    };
    Ok(generate_grf(grid, &s, spec.seed, 1)?.slice(0, 0).to_owned())
}

/// Multichannel synthetic dataset. Channel `c` of slice `t` draws its noise
/// from stream `(seed, t, c)`.
pub fn generate_climate(
    grid: &Grid,
    channels: &[ChannelSpec],
    forcing: &Array2<f64>,
    seed: u64,
    n_time: usize,
) -> Result<FieldSet> {
    if channels.is_empty() {
        return Err(Error::InvalidArgument("at least one channel required".into()));
    }
    grid.check_field(&forcing.view())?;
    let fft = Fft2::new(grid.n_lat, grid.n_lon);
    let mut data = Array4::zeros((n_time, channels.len(), grid.n_lat, grid.n_lon));
    let mut metas = Vec::new();
    for (c, spec) in channels.iter().enumerate() {
        let sqrt_var = spec.spectrum.mode_variances(grid)?.mapv(f64::sqrt);
        let background = Array2::from_shape_fn(grid.shape(), |(i, _)| {
            spec.background * (2.0 * grid.lat_centers[i].to_radians()).cos()
        });
        let mean_field = background + forcing * spec.forcing_coupling;
        for t in 0..n_time {
            let stream = derive_seed(derive_seed(seed, t as u64), c as u64);
            let mut field = filtered_noise(&fft, &sqrt_var, stream) + &mean_field;
            if let Some(thr) = spec.precip_threshold {
                field.mapv_inplace(|v| (v - thr).max(0.0));
            }
            data.slice_mut(s![t, c, .., ..]).assign(&field);
        }
        metas.push(if spec.precip_threshold.is_some() {
            ChannelMeta::precip(&spec.name, &spec.units)
        } else {
            ChannelMeta::new(&spec.name, &spec.units)
        });
    }
    FieldSet::new(data, metas, grid.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::weighted_mean;
    use proptest::prelude::*;

    fn isotropic_power(fields: &FieldSet) -> Vec<(f64, f64)> {
        // mean power per mode in unit-width shells, measured directly
        let g = &fields.grid;
        let fft = Fft2::new(g.n_lat, g.n_lon);
        let k = isotropic_wavenumbers(g.n_lat, g.n_lon, g.lat_span());
        let kmax = g.n_lon / 2;
        let mut sum = vec![0.0; kmax + 1];
        let mut cnt = vec![0.0; kmax + 1];
        for t in 0..fields.n_time() {
            let z = fft.forward(&fields.slice(t, 0).to_owned());
            for ((i, j), v) in z.indexed_iter() {
                let b = k[[i, j]].round() as usize;
                if b <= kmax {
                    sum[b] += v.norm_sqr();
                    cnt[b] += 1.0;
                }
            }
        }
        (1..=kmax)
            .filter(|b| cnt[*b] > 0.0)
            .map(|b| (b as f64, sum[b] / cnt[b]))
            .collect()
    }

    #[test]
    fn grf_zero_mean_and_deterministic() {
        let g = Grid::latlon(16, 32).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 16, amplitude: 1.5 };
        let a = generate_grf(&g, &spec, 11, 32).unwrap();
        let b = generate_grf(&g, &spec, 11, 32).unwrap();
        assert_eq!(a.data, b.data);
        let n = a.data.len() as f64;
        let mean = a.data.mean().unwrap();
        let sd = a.data.std(0.0);
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
        // the k = 0 mode is outside the band, so every slice has exactly zero mean
        assert!(a.slice(3, 0).sum().abs() < 1e-9);
        assert!((sd - 1.5).abs() < 0.15, "sd {sd}");
        a.check_finite().unwrap();
    }

    #[test]
    fn grf_spectral_slope() {
        let g = Grid::latlon(32, 64).unwrap();
        let spec = SpectrumSpec { slope: 3.0, k_min: 1, k_max: 16, amplitude: 1.0 };
        let f = generate_grf(&g, &spec, 5, 64).unwrap();
        let pts: Vec<(f64, f64)> = isotropic_power(&f)
            .into_iter()
            .filter(|(k, _)| *k >= 2.0 && *k <= 15.0)
            .map(|(k, p)| (k.ln(), p.ln()))
            .collect();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / n, sy / n);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = num / den;
        assert!((slope + 3.0).abs() < 0.3, "fitted slope {slope}");
    }

    #[test]
    fn grf_rejects_band_beyond_nyquist() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 9, amplitude: 1.0 };
        assert!(generate_grf(&g, &spec, 0, 1).is_err());
    }

    #[test]
    fn grf_slices_independent() {
        let g = Grid::latlon(8, 16).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 1.0 };
        let f = generate_grf(&g, &spec, 99, 256).unwrap();
        // the unweighted mean vanishes by construction; the area-weighted one does not
        let x: Vec<f64> = (0..256).map(|t| weighted_mean(&f.slice(t, 0), &g).unwrap()).collect();
        let m = x.iter().sum::<f64>() / 256.0;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        assert!((cov / var).abs() < 3.0 / 256f64.sqrt());
    }

    #[test]
    fn precip_like_examples() {
        let neg = Array3::from_elem((2, 3, 4), -1.0);
        assert!(make_precip_like(&neg, 0.0).iter().all(|v| *v == 0.0));
        let g = Grid::latlon(16, 32).unwrap();
        let spec = SpectrumSpec { slope: 1.0, k_min: 1, k_max: 16, amplitude: 1.0 };
        let f = generate_grf(&g, &spec, 3, 16).unwrap();
        let p = make_precip_like(&f.data.slice(s![.., 0, .., ..]).to_owned(), 0.0);
        let zeros = p.iter().filter(|v| **v == 0.0).count() as f64 / p.len() as f64;
        assert!((zeros - 0.5).abs() < 0.05, "zero fraction {zeros}");
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    fn two_channel() -> FieldSet {
        let g = Grid::latlon(8, 16).unwrap();
        let forcing = static_forcing(&g, &ForcingSpec::default()).unwrap();
        let specs = vec![
            ChannelSpec {
                name: "t".into(),
                units: "K".into(),
                spectrum: SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 3.0 },
                background: 20.0,
                forcing_coupling: -2.0,
                precip_threshold: None,
            },
            ChannelSpec {
                name: "pr".into(),
                units: "mm/day".into(),
                spectrum: SpectrumSpec { slope: 1.5, k_min: 1, k_max: 8, amplitude: 2.0 },
                background: 0.5,
                forcing_coupling: 0.3,
                precip_threshold: Some(1.0),
            },
        ];
        generate_climate(&g, &specs, &forcing, 1, 12).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let f = two_channel();
        let stats = NormStats::fit(&f, 0.01).unwrap();
        assert!(stats.log_offset[1].is_some() && stats.log_offset[0].is_none());
        let n = stats.normalize(&f).unwrap();
        n.check_finite().unwrap();
        let back = stats.denormalize(&n).unwrap();
        for (a, b) in back.data.iter().zip(f.data.iter()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
        // x = mean everywhere -> zeros
        let mut at_mean = f.clone();
        at_mean.data.slice_mut(s![.., 0, .., ..]).fill(stats.mean[0]);
        let z = stats.normalize(&at_mean).unwrap();
        assert!(z.data.slice(s![.., 0, .., ..]).iter().all(|v| v.abs() < 1e-12));
        // precipitation zero -> -mean_log / std_log
        let mut dry = f.clone();
        dry.data.slice_mut(s![.., 1, .., ..]).fill(0.0);
        let z = stats.normalize(&dry).unwrap();
        let expect = -stats.mean[1] / stats.std[1];
        assert!(z.data.slice(s![.., 1, .., ..]).iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn normalize_errors() {
        let f = two_channel();
        let mut stats = NormStats::fit(&f, 0.01).unwrap();
        let mut wet = f.clone();
        wet.data[[0, 1, 0, 0]] = -0.1;
        assert!(stats.normalize(&wet).is_err());
        stats.std[0] = 0.0;
        assert!(stats.normalize(&f).is_err());
        assert!(NormStats::identity(3).normalize(&f).is_err());
    }

    #[test]
    fn clamp_counts() {
        let mut f = two_channel();
        f.data[[0, 1, 0, 0]] = -0.5;
        f.data[[1, 1, 2, 3]] = -0.1;
        f.data[[1, 0, 2, 3]] = -7.0; // not precipitation, untouched
        assert_eq!(clamp_negative_precip(&mut f), 2);
        assert_eq!(f.data[[1, 0, 2, 3]], -7.0);
    }

    #[test]
    fn build_pairs_examples() {
        let pair = ResamplePair::new(8, 16, 2).unwrap();
        let f = two_channel();
        let (coarse, fine) = build_pairs(&f, &pair).unwrap();
        assert_eq!(coarse.n_time(), f.n_time());
        assert_eq!(fine, f);
        for t in 0..f.n_time() {
            let a = weighted_mean(&f.slice(t, 0), &pair.fine).unwrap();
            let b = weighted_mean(&coarse.slice(t, 0), &pair.coarse).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
        let constant = f.with_data(Array4::from_elem(f.data.dim(), 4.0)).unwrap();
        let (c, _) = build_pairs(&constant, &pair).unwrap();
        assert!(c.data.iter().all(|v| (v - 4.0).abs() < 1e-12));
        let wrong = ResamplePair::new(16, 32, 2).unwrap();
        assert!(build_pairs(&f, &wrong).is_err());
    }

    #[test]
    fn perturb_examples() {
        let g = Grid::latlon(16, 32).unwrap();
        let spec = SpectrumSpec { slope: 1.0, k_min: 1, k_max: 16, amplitude: 1.0 };
        let f = generate_grf(&g, &spec, 8, 8).unwrap();
        let same = perturb_imperfect(&f, &Perturbation::default(), 1).unwrap();
        assert_eq!(same.data, f.data);

        let biased = perturb_imperfect(&f, &Perturbation { bias: 0.75, ..Default::default() }, 1).unwrap();
        for t in 0..f.n_time() {
            let a = weighted_mean(&f.slice(t, 0), &g).unwrap();
            let b = weighted_mean(&biased.slice(t, 0), &g).unwrap();
            assert!((b - a - 0.75).abs() < 1e-12);
        }

        let damp = Perturbation {
            damping: Damping::Step { k0: 6.0, factor: 0.5 },
            ..Default::default()
        };
        let d = perturb_imperfect(&f, &damp, 1).unwrap();
        let p0 = isotropic_power(&f);
        let p1 = isotropic_power(&d);
        for ((k, a), (_, b)) in p0.iter().zip(&p1) {
            if *k > 6.5 {
                assert!((b / a - 0.25).abs() < 0.025, "k {k}: {}", b / a);
            }
        }

        let bad = Perturbation {
            damping: Damping::Step { k0: 2.0, factor: 1.5 },
            ..Default::default()
        };
        assert!(perturb_imperfect(&f, &bad, 1).is_err());
        assert!(perturb_imperfect_with(&f, |_| 0.0, 0.0, 0.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn normalize_round_trip(seed in 0u64..500) {
            let g = Grid::latlon(4, 8).unwrap();
            let v = crate::rng::normals(seed, 3 * 2 * 32);
            let mut data = Array4::from_shape_vec((3, 2, 4, 8), v).unwrap();
            data.slice_mut(s![.., 1, .., ..]).mapv_inplace(|x| (3.0 * x).max(0.0));
            data.slice_mut(s![.., 0, .., ..]).mapv_inplace(|x| 280.0 + 10.0 * x);
            let f = FieldSet::new(data, vec![ChannelMeta::new("t", "K"), ChannelMeta::precip("p", "mm")], g).unwrap();
            let stats = NormStats::fit(&f, 0.01).unwrap();
            let back = stats.denormalize(&stats.normalize(&f).unwrap()).unwrap();
            for (a, b) in back.data.iter().zip(f.data.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn perturbation_deterministic(seed in 0u64..500) {
            let g = Grid::latlon(8, 16).unwrap();
            let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 8, amplitude: 1.0 };
            let f = generate_grf(&g, &spec, seed, 2).unwrap();
            let p = Perturbation { damping: Damping::Gaussian { scale: 4.0 }, bias: 0.1, noise_std: 0.2 };
            prop_assert_eq!(perturb_imperfect(&f, &p, seed).unwrap().data, perturb_imperfect(&f, &p, seed).unwrap().data);
        }
    }
}

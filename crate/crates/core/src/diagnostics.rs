//! Climatological evaluation: area-weighted RMSE and temporal STD, zonal
//! climatology, zonal power spectra, pooled PDFs with tail quantiles, EOFs
//! and regional crops, plus the metrics table written by the CLI.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, Axis};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::grid::{weighted_mean, Grid};
use crate::spectral::zonal_power_row;
use crate::synthdata::FieldSet;
use crate::{Error, Result};

fn check_pair(pred: &FieldSet, truth: &FieldSet) -> Result<()> {
    pred.check_compatible(truth)?;
    if pred.grid.row_weights != truth.grid.row_weights {
        return Err(Error::InvalidArgument("prediction and truth grids differ".into()));
    }
    Ok(())
}

/// Time-mean map per channel, optionally over a subset of slices.
pub fn time_mean(fields: &FieldSet, mask: Option<&[usize]>) -> Result<Array3<f64>> {
    let sel = match mask {
        Some(idx) => {
            if idx.is_empty() || idx.iter().any(|&i| i >= fields.n_time()) {
                return Err(Error::InvalidArgument("time mask is empty or out of range".into()));
            }
            fields.data.select(Axis(0), idx)
        }
        None => fields.data.clone(),
    };
    sel.mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("no time slices".into()))
}

/// RMSE of the time-mean fields, area weighted, per channel.
pub fn weighted_rmse(pred: &FieldSet, truth: &FieldSet) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let err = time_mean(pred, None)? - time_mean(truth, None)?;
    err.outer_iter()
        .map(|e| Ok(weighted_mean(&e.mapv(|v| v * v).view(), &truth.grid)?.sqrt()))
        .collect()
}

/// Area-weighted RMSE of each time slice, averaged over time, per channel.
pub fn weighted_rmse_per_timestep(pred: &FieldSet, truth: &FieldSet) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let (nt, nc, _, _) = truth.data.dim();
    if nt == 0 {
        return Err(Error::InvalidArgument("no time slices".into()));
    }
    (0..nc)
        .map(|c| {
            let mut acc = 0.0;
            for t in 0..nt {
                let e = &pred.slice(t, c) - &truth.slice(t, c);
                acc += weighted_mean(&e.mapv(|v| v * v).view(), &truth.grid)?.sqrt();
            }
            Ok(acc / nt as f64)
        })
        .collect()
}

/// Per-cell standard deviation over time (divide by T), area-weighted mean.
pub fn temporal_std(fields: &FieldSet) -> Result<Vec<f64>> {
    if fields.n_time() < 2 {
        return Err(Error::InvalidArgument("temporal std needs at least two time slices".into()));
    }
    let std = fields.data.std_axis(Axis(0), 0.0);
    std.outer_iter().map(|m| weighted_mean(&m, &fields.grid)).collect()
}

/// Time and longitude mean per latitude row: `(channel, lat)`.
pub fn zonal_climatology(fields: &FieldSet) -> Result<Array2<f64>> {
    let tm = time_mean(fields, None)?;
    Ok(tm.mean_axis(Axis(2)).expect("non-empty longitude"))
}

/// Ensemble mean and spread (population std across members) of the zonal
/// climatology.
pub fn zonal_climatology_ensemble(members: &[FieldSet]) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let profiles = members
        .iter()
        .map(|m| {
            m.check_compatible(first)?;
            zonal_climatology(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = profiles.iter().map(|p| p.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((
        stacked.mean_axis(Axis(0)).expect("non-empty"),
        stacked.std_axis(Axis(0), 0.0),
    ))
}

/// Pointwise mean over ensemble members.
pub fn ensemble_mean(members: &[FieldSet]) -> Result<FieldSet> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let mut acc = first.data.clone();
    for m in &members[1..] {
        m.check_compatible(first)?;
        acc += &m.data;
    }
    acc /= members.len() as f64;
    first.with_data(acc)
}

/// Root of the area- and time-averaged variance across members (divide by
/// the member count), per channel.
pub fn ensemble_spread(members: &[FieldSet]) -> Result<Vec<f64>> {
    let mean = ensemble_mean(members)?;
    let mut var = mean.data.mapv(|_| 0.0);
    for m in members {
        var.zip_mut_with(&(&m.data - &mean.data), |v, d| *v += d * d / members.len() as f64);
    }
    let var = mean.with_data(var)?;
    let tm = time_mean(&var, None)?;
    tm.outer_iter().map(|v| Ok(weighted_mean(&v, &mean.grid)?.sqrt())).collect()
}

/// Mean zonal power per wavenumber `0..=n_lon/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
}

impl SpectrumResult {
    /// Total power over wavenumbers `k >= k_min`.
    pub fn band_power(&self, k_min: usize) -> f64 {
        self.power.iter().skip(k_min).sum()
    }
}

/// One-sided longitude power spectrum per channel, averaged over rows (with
/// row weights) and time. Power sums to the mean square of each row.
pub fn zonal_spectrum(fields: &FieldSet) -> Result<Vec<SpectrumResult>> {
    let (nt, nc, h, w) = fields.data.dim();
    if w < 8 {
        return Err(Error::GridSize(format!("zonal spectrum needs n_lon >= 8, got {w}")));
    }
    if nt == 0 {
        return Err(Error::InvalidArgument("no time slices".into()));
    }
    let plan = FftPlanner::new().plan_fft_forward(w);
    let weights = &fields.grid.row_weights;
    let wsum: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(nc);
    for c in 0..nc {
        let mut power = vec![0.0; w / 2 + 1];
        for t in 0..nt {
            for i in 0..h {
                let row: Vec<f64> = fields.data.slice(s![t, c, i, ..]).to_vec();
                let p = zonal_power_row(&plan, &row);
                for (acc, v) in power.iter_mut().zip(p) {
                    *acc += weights[i] * v;
                }
            }
        }
        power.iter_mut().for_each(|p| *p /= wsum * nt as f64);
        out.push(SpectrumResult {
            wavenumbers: (0..=w / 2).collect(),
            power,
        });
    }
    Ok(out)
}

/// Density histogram and tail quantiles of a pooled channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfResult {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    /// 0.1% quantile.
    pub q_low: f64,
    /// 99.9% quantile.
    pub q_high: f64,
}

fn pooled(fields: &FieldSet, channel: usize) -> Result<Vec<(f64, f64)>> {
    if channel >= fields.n_channels() {
        return Err(Error::shape(fields.n_channels(), channel));
    }
    let (nt, _, h, w) = fields.data.dim();
    let mut out = Vec::with_capacity(nt * h * w);
    for t in 0..nt {
        for i in 0..h {
            let wt = fields.grid.row_weights[i];
            for j in 0..w {
                out.push((fields.data[[t, channel, i, j]], wt));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    Ok(out)
}

/// Weighted quantiles by linear interpolation between sorted samples placed
/// at their mid-cumulative weight.
pub fn weighted_quantiles(samples: &mut [(f64, f64)], qs: &[f64]) -> Vec<f64> {
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = samples.iter().map(|s| s.1).sum();
    let mut cum = 0.0;
    let pos: Vec<f64> = samples
        .iter()
        .map(|(_, w)| {
            let p = (cum + 0.5 * w) / total;
            cum += w;
            p
        })
        .collect();
    qs.iter()
        .map(|&q| {
            let k = pos.partition_point(|p| *p < q);
            if k == 0 {
                samples[0].0
            } else if k == pos.len() {
                samples[pos.len() - 1].0
            } else {
                let t = (q - pos[k - 1]) / (pos[k] - pos[k - 1]);
                samples[k - 1].0 + t * (samples[k].0 - samples[k - 1].0)
            }
        })
        .collect()
}

/// Area-weighted histogram over all cells and times of one channel,
/// normalized to unit integral over `range`.
pub fn pdf(fields: &FieldSet, channel: usize, bins: usize, range: (f64, f64)) -> Result<PdfResult> {
    if bins < 8 {
        return Err(Error::InvalidArgument(format!("pdf needs at least 8 bins, got {bins}")));
    }
    let (lo, hi) = range;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("empty pdf range [{lo}, {hi}]")));
    }
    let mut samples = pooled(fields, channel)?;
    let width = (hi - lo) / bins as f64;
    let mut mass = vec![0.0; bins];
    for (v, w) in &samples {
        if *v >= lo && *v <= hi {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            mass[b] += w;
        }
    }
    let inside: f64 = mass.iter().sum();
    if inside == 0.0 {
        return Err(Error::Degenerate(format!("no samples inside [{lo}, {hi}]")));
    }
    let density = mass.iter().map(|m| m / (inside * width)).collect();
    let q = weighted_quantiles(&mut samples, &[0.001, 0.999]);
    Ok(PdfResult {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        density,
        q_low: q[0],
        q_high: q[1],
    })
}

/// Default shared PDF range: the reference data's 0.05% and 99.95%
/// quantiles (widened when degenerate).
pub fn pdf_range(truth: &FieldSet, channel: usize) -> Result<(f64, f64)> {
    let mut samples = pooled(truth, channel)?;
    let q = weighted_quantiles(&mut samples, &[0.0005, 0.9995]);
    if q[1] > q[0] {
        Ok((q[0], q[1]))
    } else {
        Ok((q[0] - 0.5, q[0] + 0.5))
    }
}

/// Leading EOFs of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EofResult {
    /// Unweighted spatial patterns, orthonormal under the row-weighted inner
    /// product.
    pub patterns: Vec<Array2<f64>>,
    pub explained: Vec<f64>,
    /// `(time, mode)` principal components.
    pub pcs: Array2<f64>,
}

/// EOF analysis with `√w` row weighting of the time anomalies.
pub fn eof(fields: &FieldSet, channel: usize, n_modes: usize) -> Result<EofResult> {
    if channel >= fields.n_channels() {
        return Err(Error::shape(fields.n_channels(), channel));
    }
    let (nt, _, h, w) = fields.data.dim();
    if n_modes == 0 || nt <= n_modes {
        return Err(Error::InvalidArgument(format!(
            "EOF needs more time slices ({nt}) than modes ({n_modes})"
        )));
    }
    let view = fields.data.slice(s![.., channel, .., ..]);
    let mean = view.mean_axis(Axis(0)).expect("time slices");
    let sqrt_w: Vec<f64> = fields.grid.row_weights.iter().map(|v| v.sqrt()).collect();
    let npts = h * w;
    let a = DMatrix::from_fn(nt, npts, |t, p| {
        let (i, j) = (p / w, p % w);
        (view[[t, i, j]] - mean[[i, j]]) * sqrt_w[i]
    });
    let total: f64 = a.iter().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("EOF input has zero variance".into()));
    }
    // eigenvectors of the smaller Gram matrix give one side, projection the other
    let time_side = nt <= npts;
    let gram = if time_side { &a * a.transpose() } else { a.transpose() * &a };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let k = n_modes.min(order.len());
    let mut patterns = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut pcs = Array2::zeros((nt, k));
    for (m, &idx) in order.iter().take(k).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        let vec = eig.eigenvectors.column(idx);
        let (pc, space) = if time_side {
            let s_val = lam.sqrt();
            let space = if s_val > 0.0 { a.transpose() * vec / s_val } else { DVector::zeros(npts) };
            (vec * s_val, space)
        } else {
            (&a * vec, vec.into_owned())
        };
        let mut pat = Array2::from_shape_fn((h, w), |(i, j)| space[i * w + j] / sqrt_w[i]);
        let peak = pat.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        pat *= sign;
        for t in 0..nt {
            pcs[[t, m]] = sign * pc[t];
        }
        patterns.push(pat);
        explained.push(lam / total);
    }
    Ok(EofResult {
        patterns,
        explained,
        pcs,
    })
}

fn axis_indices(centers: &[f64], range: (f64, f64)) -> Vec<usize> {
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    centers
        .iter()
        .enumerate()
        .filter(|(_, c)| **c >= lo && **c <= hi)
        .map(|(i, _)| i)
        .collect()
}

/// Sub-domain with renormalized row weights. A crop covering every longitude
/// stays periodic.
pub fn region_crop(fields: &FieldSet, lat_range: (f64, f64), lon_range: (f64, f64)) -> Result<FieldSet> {
    let g = &fields.grid;
    let rows = axis_indices(&g.lat_centers, lat_range);
    let cols = axis_indices(&g.lon_centers, lon_range);
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "region lat {lat_range:?} lon {lon_range:?} does not intersect the grid"
        )));
    }
    let periodic = g.lon_periodic && cols.len() == g.n_lon;
    let weights: Vec<f64> = rows.iter().map(|&i| g.row_weights[i]).collect();
    let grid = Grid::from_parts(
        rows.iter().map(|&i| g.lat_centers[i]).collect(),
        cols.iter().map(|&j| g.lon_centers[j]).collect(),
        &weights,
        periodic,
    )?;
    let data = fields.data.select(Axis(2), &rows).select(Axis(3), &cols);
    let mut out = FieldSet::new(data, fields.channels.clone(), grid)?;
    out.time_step_hours = fields.time_step_hours;
    Ok(out)
}

pub const METRICS_SCHEMA: &str = "edm-downscale.metrics.v1";

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub channel: String,
    pub metric: String,
    pub value: f64,
    /// 1 = lowest among models for ranked metrics.
    pub rank: Option<usize>,
}

/// Metrics for several models against one truth, with provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub config_hash: String,
    pub seed: u64,
}

const RANKED: [&str; 2] = ["rmse_climatology", "rmse_per_timestep"];

impl MetricsReport {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            rows: Vec::new(),
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn push(&mut self, model: &str, channel: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            model: model.into(),
            channel: channel.into(),
            metric: metric.into(),
            value,
            rank: None,
        });
    }

    /// Standard battery for one deterministic model.
    pub fn add_model(&mut self, model: &str, pred: &FieldSet, truth: &FieldSet, k_high: usize) -> Result<()> {
        self.add_ensemble(model, std::slice::from_ref(pred), truth, k_high)
    }

    /// RMSE variants of the ensemble mean, member-averaged temporal STD,
    /// member-averaged high-band power ratio above `k_high` and, for more
    /// than one member, the ensemble spread.
    pub fn add_ensemble(&mut self, model: &str, members: &[FieldSet], truth: &FieldSet, k_high: usize) -> Result<()> {
        let mean = ensemble_mean(members)?;
        let rmse = weighted_rmse(&mean, truth)?;
        let rmse_t = weighted_rmse_per_timestep(&mean, truth)?;
        let nc = truth.n_channels();
        let mut std = vec![0.0; nc];
        let mut high = vec![0.0; nc];
        for m in members {
            if m.n_time() > 1 {
                for (acc, v) in std.iter_mut().zip(temporal_std(m)?) {
                    *acc += v / members.len() as f64;
                }
            }
            for (acc, s) in high.iter_mut().zip(zonal_spectrum(m)?) {
                *acc += s.band_power(k_high) / members.len() as f64;
            }
        }
        let st = zonal_spectrum(truth)?;
        let spread = if members.len() > 1 { Some(ensemble_spread(members)?) } else { None };
        for (c, meta) in truth.channels.iter().enumerate() {
            self.push(model, &meta.name, "rmse_climatology", rmse[c]);
            self.push(model, &meta.name, "rmse_per_timestep", rmse_t[c]);
            if truth.n_time() > 1 {
                self.push(model, &meta.name, "temporal_std", std[c]);
            }
            let truth_high = st[c].band_power(k_high);
            if truth_high > 0.0 {
                self.push(model, &meta.name, "high_band_power_ratio", high[c] / truth_high);
            }
            if let Some(s) = &spread {
                self.push(model, &meta.name, "ensemble_spread", s[c]);
            }
        }
        Ok(())
    }

    /// Assigns ranks within each `(channel, metric)` group of ranked metrics.
    pub fn rank(&mut self) {
        let mut groups: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.channel.clone(), r.metric.clone());
            if RANKED.contains(&r.metric.as_str()) && !groups.contains(&key) {
                groups.push(key);
            }
        }
        for (ch, metric) in groups {
            let mut idx: Vec<usize> = (0..self.rows.len())
                .filter(|&i| self.rows[i].channel == ch && self.rows[i].metric == metric)
                .collect();
            idx.sort_by(|&a, &b| self.rows[a].value.total_cmp(&self.rows[b].value));
            for (rank, i) in idx.into_iter().enumerate() {
                self.rows[i].rank = Some(rank + 1);
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.rows.iter().find(|r| !r.value.is_finite()) {
            Some(r) => Err(Error::NonFinite {
                step: 0,
                context: format!("metric {} of {} / {}", r.metric, r.model, r.channel),
            }),
            None => Ok(()),
        }
    }

    /// CSV with a schema line, then one row per model × channel × metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "#schema={METRICS_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["model", "channel", "metric", "value", "rank", "config_hash", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.channel.clone(),
                r.metric.clone(),
                format!("{:.10e}", r.value),
                r.rank.map(|k| k.to_string()).unwrap_or_default(),
                self.config_hash.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |reason: &str| Error::Bundle {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut lines = text.splitn(2, '\n');
        if lines.next().map(str::trim) != Some(&format!("#schema={METRICS_SCHEMA}")[..]) {
            return Err(bad("missing or unknown metrics schema line"));
        }
        let body = lines.next().unwrap_or("");
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut report = MetricsReport::default();
        for rec in rdr.records() {
            let rec = rec?;
            let value: f64 = rec[3].parse().map_err(|_| bad("unparseable value"))?;
            let rank = if rec[4].is_empty() {
                None
            } else {
                Some(rec[4].parse().map_err(|_| bad("unparseable rank"))?)
            };
            report.config_hash = rec[5].to_string();
            report.seed = rec[6].parse().map_err(|_| bad("unparseable seed"))?;
            report.rows.push(MetricRow {
                model: rec[0].to_string(),
                channel: rec[1].to_string(),
                metric: rec[2].to_string(),
                value,
                rank,
            });
        }
        Ok(report)
    }

    pub fn get(&self, model: &str, channel: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.channel == channel && r.metric == metric)
            .map(|r| r.value)
    }
}

//! Reproducible runs: data generation, training, sampling and evaluation,
//! each reading and writing verified bundles inside one run directory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::DType;
use ndarray::{s, Array2, Array4, Axis};
use serde_json::json;

use crate::baselines::{bicubic_sr, regressor_sr, train_regressor, RegressionData, Regressor};
use crate::bundle::ArrayBundle;
use crate::config::RunConfig;
use crate::denoisers::{train_denoiser, Conditioned, ConvDenoiser, TrainingData};
use crate::diagnostics::{
    eof, pdf, pdf_range, zonal_climatology, zonal_climatology_ensemble, zonal_spectrum, MetricsReport,
};
use crate::edm::pf_ode_sample;
use crate::guidance::{posterior_sample, Guidance};
use crate::rng::derive_seed;
use crate::synthdata::{
    build_pairs, clamp_negative_precip, generate_climate, map_slices, perturb_imperfect, static_forcing, FieldSet,
    NormStats,
};
use crate::{Error, ResamplePair, Result};

/// Members sampled per conditional call.
const SAMPLE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DenoiserCond,
    DenoiserUncond,
    Regressor,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [Self::DenoiserCond, Self::DenoiserUncond, Self::Regressor];

    pub fn name(&self) -> &'static str {
        match self {
            Self::DenoiserCond => "denoiser-cond",
            Self::DenoiserUncond => "denoiser-uncond",
            Self::Regressor => "regressor",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Self::DenoiserCond => 10,
            Self::DenoiserUncond => 11,
            Self::Regressor => 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Bicubic,
    Regressor,
    ConditionalEdm,
    PosteriorEdm,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Bicubic, Self::Regressor, Self::ConditionalEdm, Self::PosteriorEdm];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Bicubic => "bicubic",
            Self::Regressor => "regressor",
            Self::ConditionalEdm => "conditional-edm",
            Self::PosteriorEdm => "posterior-edm",
        }
    }
}

macro_rules! named_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| {
                        let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                        Error::InvalidArgument(format!("unknown value {s:?}; expected one of {}", names.join(", ")))
                    })
            }
        }
    };
}

named_enum!(ModelKind);
named_enum!(Method);

/// Everything `gen-data` produces.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub fine: FieldSet,
    pub coarse: FieldSet,
    pub perturbed: FieldSet,
    pub forcing: Array2<f64>,
    pub stats: NormStats,
    pub n_train: usize,
}

impl DataSet {
    fn split(f: &FieldSet, range: std::ops::Range<usize>) -> FieldSet {
        f.select_times(&range.collect::<Vec<_>>())
    }

    pub fn fine_train(&self) -> FieldSet {
        Self::split(&self.fine, 0..self.n_train)
    }

    pub fn fine_test(&self) -> FieldSet {
        Self::split(&self.fine, self.n_train..self.fine.n_time())
    }

    pub fn coarse_train(&self) -> FieldSet {
        Self::split(&self.coarse, 0..self.n_train)
    }

    /// Held-out coarse inputs, clean or perturbed.
    pub fn coarse_test(&self, perturbed: bool) -> FieldSet {
        let src = if perturbed { &self.perturbed } else { &self.coarse };
        Self::split(src, self.n_train..src.n_time())
    }
}

/// Output of one sampling method on the held-out inputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub members: Vec<FieldSet>,
    pub clamped: usize,
    /// Posterior sampling only: `[time][member]` measurement residual norms
    /// in normalized units.
    pub residuals: Option<Vec<Vec<f64>>>,
}

/// A run directory bound to a validated configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    hash: String,
}

fn seed_for(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, tag)
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.8e}")])?;
    }
    w.flush()?;
    Ok(())
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        let dir = config.run_dir();
        Self::with_dir(config, dir)
    }

    pub fn with_dir(config: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self {
            config,
            dir: dir.into(),
            hash,
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn pair(&self) -> Result<ResamplePair> {
        self.config.pair()
    }

    fn write(&self, rel: &str, b: &ArrayBundle, outputs: &mut Vec<String>) -> Result<()> {
        let h = b.write(&self.path(rel))?;
        outputs.push(format!("{rel}:{}", &h[..16]));
        Ok(())
    }

    /// Reads a bundle, requiring that it verifies and carries this run's
    /// config hash.
    pub fn read(&self, rel: &str) -> Result<ArrayBundle> {
        let stem = self.path(rel);
        let b = ArrayBundle::read(&stem)?;
        if b.manifest.config_hash != self.hash {
            return Err(Error::Bundle {
                path: stem.with_extension("json"),
                reason: format!(
                    "config hash {} does not match the current config {}",
                    b.manifest.config_hash, self.hash
                ),
            });
        }
        Ok(b)
    }

    fn log(&self, stage: &str, start: Instant, outputs: &[String]) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("run.log"))?;
        writeln!(
            f,
            "stage={stage} wall_s={:.3} config={} outputs={}",
            start.elapsed().as_secs_f64(),
            self.hash,
            outputs.join(",")
        )?;
        Ok(())
    }

    /// Generates fine fields, their block means, perturbed inputs, the
    /// static forcing and training-split normalization statistics.
    pub fn gen_data(&self) -> Result<DataSet> {
        let start = Instant::now();
        let c = &self.config;
        let pair = self.pair()?;
        let forcing = static_forcing(&pair.fine, &c.data.forcing)?;
        let n_time = c.data.n_train + c.data.n_test;
        let fine = generate_climate(&pair.fine, &c.channels, &forcing, seed_for(c.seed, 1), n_time)?;
        let (coarse, fine) = build_pairs(&fine, &pair)?;
        let mut perturbed = perturb_imperfect(&coarse, &c.data.perturbation, seed_for(c.seed, 2))?;
        clamp_negative_precip(&mut perturbed);
        let stats = NormStats::fit(
            &fine.select_times(&(0..c.data.n_train).collect::<Vec<_>>()),
            c.data.log_offset_fraction,
        )?;
        let data = DataSet {
            fine,
            coarse,
            perturbed,
            forcing,
            stats,
            n_train: c.data.n_train,
        };
        let mut out = Vec::new();
        let h = &self.hash;
        self.write("data/fine", &ArrayBundle::from_fields(&data.fine, h, c.seed)?, &mut out)?;
        self.write("data/coarse", &ArrayBundle::from_fields(&data.coarse, h, c.seed)?, &mut out)?;
        self.write("data/coarse_perturbed", &ArrayBundle::from_fields(&data.perturbed, h, c.seed)?, &mut out)?;
        let forcing_b = ArrayBundle::from_array(&data.forcing.clone().into_dyn(), &["lat", "lon"], h, c.seed)?;
        self.write("data/forcing", &forcing_b, &mut out)?;
        self.write("data/norm_stats", &stats_bundle(&data.stats, h, c.seed)?, &mut out)?;
        self.log("gen-data", start, &out)?;
        Ok(data)
    }

    pub fn load_data(&self) -> Result<DataSet> {
        let fine = self.read("data/fine")?.to_fields()?;
        let coarse = self.read("data/coarse")?.to_fields()?;
        let perturbed = self.read("data/coarse_perturbed")?.to_fields()?;
        let forcing = self
            .read("data/forcing")?
            .to_array()?
            .into_dimensionality()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let sb = self.read("data/norm_stats")?;
        let stats = serde_json::from_value(sb.manifest.attrs.get("norm_stats").cloned().unwrap_or_default())
            .map_err(|e| Error::Bundle {
                path: self.path("data/norm_stats.json"),
                reason: format!("malformed norm_stats attribute: {e}"),
            })?;
        Ok(DataSet {
            fine,
            coarse,
            perturbed,
            forcing,
            stats,
            n_train: self.config.data.n_train,
        })
    }

    fn normalized_train(&self, data: &DataSet) -> Result<(FieldSet, FieldSet)> {
        Ok((
            data.stats.normalize(&data.fine_train())?,
            data.stats.normalize(&data.coarse_train())?,
        ))
    }

    fn build_denoiser(&self, kind: ModelKind) -> Result<ConvDenoiser> {
        let cfg = self.config.denoiser_config(kind == ModelKind::DenoiserCond);
        ConvDenoiser::build(&cfg, DType::F32, seed_for(self.config.seed, kind.tag()))
    }

    fn build_regressor(&self) -> Result<Regressor> {
        Regressor::build(
            &self.config.regressor_config(),
            DType::F32,
            seed_for(self.config.seed, ModelKind::Regressor.tag()),
        )
    }

    /// Trains one model on the training split; writes a checkpoint and the
    /// loss trace. Returns the per-step losses.
    pub fn train(&self, kind: ModelKind, data: &DataSet) -> Result<Vec<f64>> {
        let start = Instant::now();
        let c = &self.config;
        let pair = self.pair()?;
        let (fine_n, coarse_n) = self.normalized_train(data)?;
        let train_seed = seed_for(c.seed, kind.tag() + 100);
        let (params, losses, arch) = match kind {
            ModelKind::DenoiserCond | ModelKind::DenoiserUncond => {
                let net = self.build_denoiser(kind)?;
                let cond = if kind == ModelKind::DenoiserCond {
                    Some(c.denoiser.conditioning.condition(&coarse_n.data, Some(&data.forcing), &pair)?)
                } else {
                    None
                };
                let td = TrainingData::new(fine_n.data.clone(), cond)?;
                let losses = train_denoiser(&net, &td, &c.schedule, &c.denoiser.training, train_seed)?;
                (net.params().export()?, losses, json!(net.config()))
            }
            ModelKind::Regressor => {
                let net = self.build_regressor()?;
                let up = map_slices(&coarse_n, &pair.fine, |v| pair.bicubic_upsample(&v))?;
                let rd = RegressionData {
                    upsampled: up.data,
                    targets: fine_n.data.clone(),
                    forcing: data.forcing.clone(),
                };
                let losses = train_regressor(&net, &rd, &c.regressor.training, train_seed)?;
                (net.params().export()?, losses, json!(net.config()))
            }
        };
        let bundle = ArrayBundle::from_segments(&params, &self.hash, c.seed)?
            .with_attr("model", json!(kind.name()))
            .with_attr("architecture", arch)
            .with_attr("conditioning", json!(c.denoiser.conditioning));
        let mut out = Vec::new();
        let rel = format!("models/{}", kind.name());
        self.write(&rel, &bundle, &mut out)?;
        let loss_path = self.path(&format!("models/{}_loss.csv", kind.name()));
        write_loss_csv(&loss_path, &losses)?;
        out.push(format!("models/{}_loss.csv:{}", kind.name(), &file_hash(&loss_path)?[..16]));
        self.log(&format!("train {}", kind.name()), start, &out)?;
        Ok(losses)
    }

    /// Restores a trained denoiser from its checkpoint.
    pub fn load_denoiser(&self, kind: ModelKind) -> Result<ConvDenoiser> {
        if kind == ModelKind::Regressor {
            return Err(Error::InvalidArgument("regressor is not a denoiser".into()));
        }
        let net = self.build_denoiser(kind)?;
        net.params().import(&self.read(&format!("models/{}", kind.name()))?.to_segments()?)?;
        Ok(net)
    }

    pub fn load_regressor(&self) -> Result<Regressor> {
        let net = self.build_regressor()?;
        net.params().import(&self.read("models/regressor")?.to_segments()?)?;
        Ok(net)
    }

    /// Super-resolves the held-out coarse inputs; writes
    /// `predictions/<method>` as a `(member, time, channel, lat, lon)` bundle.
    pub fn sample(&self, method: Method, data: &DataSet) -> Result<Prediction> {
        let start = Instant::now();
        let c = &self.config;
        let pair = self.pair()?;
        let coarse = data.coarse_test(c.sampling.use_perturbed);
        let coarse_n = data.stats.normalize(&coarse)?;
        let truth_like = data.fine_test();
        let n_ens = c.sampling.n_ensemble;
        let sample_seed = seed_for(c.seed, 30 + method as u64);
        let mut residuals = None;
        let mut members = match method {
            Method::Bicubic => vec![bicubic_sr(&coarse, &pair)?],
            Method::Regressor => {
                let net = self.load_regressor()?;
                vec![regressor_sr(&net, &coarse_n, &data.forcing, &pair, &data.stats)?]
            }
            Method::ConditionalEdm => {
                let net = self.load_denoiser(ModelKind::DenoiserCond)?;
                let cond = c.denoiser.conditioning.condition(&coarse_n.data, Some(&data.forcing), &pair)?;
                let fields = sample_conditional(&net, &cond, n_ens, c, sample_seed)?;
                self.denormalize_members(fields, &truth_like, data)?
            }
            Method::PosteriorEdm => {
                let net = self.load_denoiser(ModelKind::DenoiserUncond)?;
                let (nt, nc, hc, wc) = coarse_n.data.dim();
                let (h, w) = pair.fine.shape();
                let mut fields = Array4::zeros((n_ens * nt, nc, h, w));
                let mut res = Vec::with_capacity(nt);
                for t in 0..nt {
                    let y = coarse_n.data.slice(s![t..t + 1, .., .., ..]).to_owned();
                    debug_assert_eq!(y.dim(), (1, nc, hc, wc));
                    let g = Guidance::new(&pair, &y, c.guidance)?;
                    let ens = posterior_sample(&net, &c.schedule, &g, derive_seed(sample_seed, t as u64), n_ens)?;
                    for e in 0..n_ens {
                        fields.slice_mut(s![e * nt + t, .., .., ..]).assign(&ens.samples.slice(s![e, .., .., ..]));
                    }
                    res.push(ens.residuals);
                }
                residuals = Some(res);
                self.denormalize_members(fields, &truth_like, data)?
            }
        };
        let mut clamped = 0;
        for m in &mut members {
            clamped += clamp_negative_precip(m);
            m.check_finite()?;
        }
        let mut bundle = ArrayBundle::from_ensemble(&members, &self.hash, c.seed)?
            .with_attr("method", json!(method.name()))
            .with_attr("precip_clamped", json!(clamped));
        if let Some(r) = &residuals {
            bundle = bundle.with_attr("measurement_residuals", json!(r));
        }
        let mut out = Vec::new();
        self.write(&format!("predictions/{}", method.name()), &bundle, &mut out)?;
        self.log(&format!("sample {} clamped={clamped}", method.name()), start, &out)?;
        Ok(Prediction {
            members,
            clamped,
            residuals,
        })
    }

    /// Splits `(member·time, C, H, W)` normalized samples into members and
    /// maps them back to physical units.
    fn denormalize_members(&self, fields: Array4<f64>, like: &FieldSet, data: &DataSet) -> Result<Vec<FieldSet>> {
        let nt = like.n_time();
        let n_ens = fields.dim().0 / nt;
        (0..n_ens)
            .map(|e| {
                let part = fields.slice(s![e * nt..(e + 1) * nt, .., .., ..]).to_owned();
                data.stats.denormalize(&like.with_data(part)?)
            })
            .collect()
    }

    pub fn load_prediction(&self, method: Method) -> Result<Vec<FieldSet>> {
        self.read(&format!("predictions/{}", method.name()))?.to_ensemble()
    }

    /// Compares every available prediction (or `methods`) with the held-out
    /// truth; writes `metrics.csv` and diagnostic bundles.
    pub fn evaluate(&self, methods: Option<&[Method]>, data: &DataSet) -> Result<MetricsReport> {
        let start = Instant::now();
        let c = &self.config;
        let truth = data.fine_test();
        let k_high = c.evaluation.k_high;
        let mut report = MetricsReport::new(self.hash.clone(), c.seed);
        let mut models: Vec<(String, Vec<FieldSet>)> = vec![("truth".into(), vec![truth.clone()])];
        let candidates: Vec<Method> = match methods {
            Some(m) => m.to_vec(),
            None => Method::ALL
                .into_iter()
                .filter(|m| self.path(&format!("predictions/{}.json", m.name())).exists())
                .collect(),
        };
        for m in candidates {
            let stem = format!("predictions/{}", m.name());
            let b = self.read(&stem)?;
            if let Some(r) = b.manifest.attrs.get("measurement_residuals") {
                let res: Vec<Vec<f64>> = serde_json::from_value(r.clone()).map_err(|e| Error::Bundle {
                    path: self.path(&format!("{stem}.json")),
                    reason: format!("malformed residuals: {e}"),
                })?;
                let n_ens = res.first().map_or(0, Vec::len);
                for e in 0..n_ens {
                    let mean = res.iter().map(|r| r[e]).sum::<f64>() / res.len() as f64;
                    report.push(m.name(), "all", &format!("measurement_residual_m{e}"), mean);
                }
            }
            models.push((m.name().into(), b.to_ensemble()?));
        }
        for (name, members) in &models {
            report.add_ensemble(name, members, &truth, k_high)?;
        }
        report.rank();
        report.check_finite()?;
        std::fs::create_dir_all(&self.dir)?;
        let csv_path = self.path("metrics.csv");
        report.write_csv(&csv_path)?;
        let mut out = vec![format!("metrics.csv:{}", &file_hash(&csv_path)?[..16])];
        for (name, members) in &models {
            self.write_diagnostics(name, members, &truth, &mut out)?;
        }
        self.log("evaluate", start, &out)?;
        Ok(report)
    }

    fn write_diagnostics(&self, name: &str, members: &[FieldSet], truth: &FieldSet, out: &mut Vec<String>) -> Result<()> {
        let c = &self.config;
        let h = &self.hash;
        let pooled = FieldSet::concat_time(members)?;
        let nc = truth.n_channels();
        let spectra = zonal_spectrum(&pooled)?;
        let nk = spectra[0].power.len();
        let sp = Array2::from_shape_fn((nc, nk), |(ch, k)| spectra[ch].power[k]);
        self.write(
            &format!("diagnostics/spectrum_{name}"),
            &ArrayBundle::from_array(&sp.into_dyn(), &["channel", "wavenumber"], h, c.seed)?,
            out,
        )?;
        let (profile, spread) = if members.len() > 1 {
            zonal_climatology_ensemble(members)?
        } else {
            let p = zonal_climatology(&members[0])?;
            let z = p.mapv(|_| 0.0);
            (p, z)
        };
        let zonal = ndarray::stack(Axis(0), &[profile.view(), spread.view()]).expect("equal shapes");
        self.write(
            &format!("diagnostics/zonal_{name}"),
            &ArrayBundle::from_array(&zonal.into_dyn(), &["stat", "channel", "lat"], h, c.seed)?,
            out,
        )?;
        let bins = c.evaluation.pdf_bins;
        let mut dens = Array2::zeros((nc, bins));
        let mut meta = Vec::new();
        for ch in 0..nc {
            let p = pdf(&pooled, ch, bins, pdf_range(truth, ch)?)?;
            dens.row_mut(ch).assign(&ndarray::Array1::from(p.density.clone()));
            meta.push(json!({ "edges": p.edges, "q_low": p.q_low, "q_high": p.q_high }));
        }
        self.write(
            &format!("diagnostics/pdf_{name}"),
            &ArrayBundle::from_array(&dens.into_dyn(), &["channel", "bin"], h, c.seed)?.with_attr("channels", json!(meta)),
            out,
        )?;
        let modes = c.evaluation.eof_modes.min(pooled.n_time() - 1);
        let (hh, ww) = truth.grid.shape();
        let mut pats = ndarray::Array4::zeros((nc, modes, hh, ww));
        let mut explained = Vec::new();
        for ch in 0..nc {
            match eof(&pooled, ch, modes) {
                Ok(r) => {
                    for (m, p) in r.patterns.iter().enumerate() {
                        pats.slice_mut(s![ch, m, .., ..]).assign(p);
                    }
                    explained.push(r.explained);
                }
                Err(Error::Degenerate(_)) => explained.push(vec![0.0; modes]),
                Err(e) => return Err(e),
            }
        }
        self.write(
            &format!("diagnostics/eof_{name}"),
            &ArrayBundle::from_array(&pats.into_dyn(), &["channel", "mode", "lat", "lon"], h, c.seed)?
                .with_attr("explained", json!(explained)),
            out,
        )?;
        Ok(())
    }
}

fn stats_bundle(stats: &NormStats, hash: &str, seed: u64) -> Result<ArrayBundle> {
    let nc = stats.mean.len();
    let mut a = Array2::zeros((3, nc));
    for ch in 0..nc {
        a[[0, ch]] = stats.mean[ch];
        a[[1, ch]] = stats.std[ch];
        a[[2, ch]] = stats.log_offset[ch].unwrap_or(f64::NAN);
    }
    Ok(ArrayBundle::from_array(&a.into_dyn(), &["stat", "channel"], hash, seed)?.with_attr("norm_stats", json!(stats)))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(crate::bundle::sha256_hex(&std::fs::read(path)?))
}

/// Conditional PF-ODE sampling of `n_ens` members per condition, in fixed
/// chunks so the result does not depend on memory limits. Output rows are
/// member-major: `e * T + t`.
pub fn sample_conditional(
    net: &ConvDenoiser,
    cond: &Array4<f64>,
    n_ens: usize,
    config: &RunConfig,
    seed: u64,
) -> Result<Array4<f64>> {
    let (nt, _, h, w) = cond.dim();
    let nc = net.config().channels;
    let total = nt * n_ens;
    let mut out = Array4::zeros((total, nc, h, w));
    for (chunk, lo) in (0..total).step_by(SAMPLE_CHUNK).enumerate() {
        let hi = (lo + SAMPLE_CHUNK).min(total);
        let rows: Vec<usize> = (lo..hi).map(|r| r % nt).collect();
        let den = Conditioned {
            net,
            cond: cond.select(Axis(0), &rows),
        };
        let x = pf_ode_sample(&den, &config.schedule, (hi - lo, nc, h, w), derive_seed(seed, chunk as u64), None)?;
        out.slice_mut(s![lo..hi, .., .., ..]).assign(&x);
    }
    Ok(out)
}

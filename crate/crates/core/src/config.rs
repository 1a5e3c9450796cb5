//! Experiment configuration: one TOML file drives a whole run. Scalar CLI
//! flags override the file, which overrides the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::RegressorConfig;
use crate::bundle::sha256_hex;
use crate::denoisers::{ConditioningMode, ConvDenoiserConfig};
use crate::edm::NoiseSchedule;
use crate::grid::{Grid, ResamplePair};
use crate::guidance::GuidanceConfig;
use crate::nn::OptimConfig;
use crate::synthdata::{ChannelSpec, ForcingSpec, Perturbation, SpectrumSpec};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "EDM_DOWNSCALE_OUT";

pub const DEMO_CONFIG: &str = include_str!("../configs/demo.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub factor: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_lat: 32,
            n_lon: 64,
            factor: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// `ε` of the precipitation log transform as a fraction of channel std.
    pub log_offset_fraction: f64,
    pub forcing: ForcingSpec,
    /// Applied to the coarse inputs seen at sampling time.
    pub perturbation: Perturbation,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_test: 128,
            log_offset_fraction: 0.01,
            forcing: ForcingSpec::default(),
            perturbation: Perturbation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub architecture: ConvDenoiserConfig,
    pub conditioning: ConditioningMode,
    pub training: OptimConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            architecture: ConvDenoiserConfig::default(),
            conditioning: ConditioningMode::Full,
            training: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSection {
    pub architecture: RegressorConfig,
    pub training: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_ensemble: usize,
    /// Condition on the perturbed coarse fields instead of the clean ones.
    pub use_perturbed: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_ensemble: 4,
            use_perturbed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// First wavenumber of the high band.
    pub k_high: usize,
    pub pdf_bins: usize,
    pub eof_modes: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            k_high: 8,
            pdf_bins: 40,
            eof_modes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Overrides `$EDM_DOWNSCALE_OUT/<run_name>` when set.
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub grid: GridConfig,
    pub channels: Vec<ChannelSpec>,
    pub data: DataConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserSection,
    pub regressor: RegressorSection,
    pub guidance: GuidanceConfig,
    pub sampling: SamplingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: None,
            seed: 0,
            grid: GridConfig::default(),
            channels: vec![
                ChannelSpec {
                    name: "temperature".into(),
                    units: "K".into(),
                    spectrum: SpectrumSpec {
                        slope: 3.0,
                        k_min: 1,
                        k_max: 16,
                        amplitude: 2.0,
                    },
                    background: 10.0,
                    forcing_coupling: 1.5,
                    precip_threshold: None,
                },
                ChannelSpec {
                    name: "precipitation".into(),
                    units: "mm/day".into(),
                    spectrum: SpectrumSpec {
                        slope: 2.0,
                        k_min: 1,
                        k_max: 32,
                        amplitude: 1.0,
                    },
                    background: 0.3,
                    forcing_coupling: 0.3,
                    precip_threshold: Some(0.5),
                },
            ],
            data: DataConfig::default(),
            schedule: NoiseSchedule::default(),
            denoiser: DenoiserSection::default(),
            regressor: RegressorSection::default(),
            guidance: GuidanceConfig::default(),
            sampling: SamplingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Scalar overrides from the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_ensemble: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(mut p) => {
                p.iter_mut().for_each(|m| *m = format!("{}: {m}", path.display()));
                Error::Config(p)
            }
            other => other,
        })
    }

    pub fn demo() -> Self {
        Self::from_toml(DEMO_CONFIG).expect("shipped demo config parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(n) = o.n_ensemble {
            self.sampling.n_ensemble = n;
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn pair(&self) -> Result<ResamplePair> {
        ResamplePair::new(self.grid.n_lat, self.grid.n_lon, self.grid.factor)
    }

    /// Denoiser architecture with channel counts filled in.
    pub fn denoiser_config(&self, conditional: bool) -> ConvDenoiserConfig {
        let mut cfg = self.denoiser.architecture.clone();
        cfg.channels = self.n_channels();
        cfg.cond_channels = if conditional {
            self.denoiser.conditioning.cond_channels(self.n_channels())
        } else {
            0
        };
        cfg.sigma_data = self.schedule.sigma_data;
        cfg
    }

    pub fn regressor_config(&self) -> RegressorConfig {
        RegressorConfig {
            channels: self.n_channels(),
            ..self.regressor.architecture.clone()
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let g = &self.grid;
        let fine = match self.pair() {
            Ok(pair) => Some(pair.fine),
            Err(e) => {
                p.push(format!("grid: {e}"));
                Grid::latlon(g.n_lat, g.n_lon).ok()
            }
        };
        if self.channels.is_empty() {
            p.push("channels: at least one channel required".into());
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.name.is_empty() {
                p.push(format!("channels[{i}]: empty name"));
            }
            if self.channels[..i].iter().any(|o| o.name == c.name) {
                p.push(format!("channels[{i}]: duplicate name {:?}", c.name));
            }
            if let Some(fine) = &fine {
                if let Err(e) = c.spectrum.validate(fine) {
                    p.push(format!("channels[{i}].spectrum: {e}"));
                }
            }
            if !c.background.is_finite() || !c.forcing_coupling.is_finite() {
                p.push(format!("channels[{i}]: background and forcing_coupling must be finite"));
            }
            if matches!(c.precip_threshold, Some(t) if !t.is_finite()) {
                p.push(format!("channels[{i}]: precip_threshold must be finite"));
            }
        }
        let d = &self.data;
        if d.n_train == 0 {
            p.push("data.n_train must be positive".into());
        }
        if d.n_test < 2 {
            p.push("data.n_test must be at least 2".into());
        }
        if !(d.log_offset_fraction > 0.0) {
            p.push("data.log_offset_fraction must be positive".into());
        }
        if !(d.forcing.slope > 0.0) {
            p.push("data.forcing.slope must be positive".into());
        }
        let pert = &d.perturbation;
        if !(pert.noise_std >= 0.0) || !pert.bias.is_finite() {
            p.push("data.perturbation: noise_std must be >= 0 and bias finite".into());
        }
        let damp_ok = (0..=64).all(|k| {
            let f = pert.damping.factor(k as f64 + 0.5);
            f > 0.0 && f <= 1.0
        });
        if !damp_ok {
            p.push("data.perturbation.damping must stay within (0, 1]".into());
        }
        p.extend(self.schedule.problems().into_iter().map(|m| format!("schedule: {m}")));
        for conditional in [false, true] {
            let cfg = self.denoiser_config(conditional);
            if conditional {
                p.extend(cfg.problems().into_iter().map(|m| format!("denoiser.architecture: {m}")));
            }
            if cfg.problems().is_empty() && (g.n_lat % cfg.divisor() != 0 || g.n_lon % cfg.divisor() != 0) {
                p.push(format!("denoiser: grid {}x{} not divisible by {}", g.n_lat, g.n_lon, cfg.divisor()));
                break;
            }
        }
        if let ConditioningMode::SingleChannel { channel } = self.denoiser.conditioning {
            if channel >= self.n_channels() {
                p.push(format!("denoiser.conditioning: channel {channel} out of range"));
            }
        }
        if let Err(e) = self.denoiser.training.validate() {
            p.push(format!("denoiser.training: {e}"));
        }
        let rc = self.regressor_config();
        let rp = rc.problems();
        if rp.is_empty() && (g.n_lat % rc.divisor() != 0 || g.n_lon % rc.divisor() != 0) {
            p.push(format!("regressor: grid {}x{} not divisible by {}", g.n_lat, g.n_lon, rc.divisor()));
        }
        p.extend(rp.into_iter().map(|m| format!("regressor.architecture: {m}")));
        if let Err(e) = self.regressor.training.validate() {
            p.push(format!("regressor.training: {e}"));
        }
        p.extend(self.guidance.problems().into_iter().map(|m| format!("guidance: {m}")));
        if self.sampling.n_ensemble == 0 {
            p.push("sampling.n_ensemble must be positive".into());
        }
        let e = &self.evaluation;
        if e.k_high < 1 || e.k_high > g.n_lon / 2 {
            p.push(format!("evaluation.k_high must lie in [1, {}]", g.n_lon / 2));
        }
        if e.pdf_bins < 8 {
            p.push("evaluation.pdf_bins must be at least 8".into());
        }
        if e.eof_modes == 0 || e.eof_modes >= d.n_test.max(1) {
            p.push("evaluation.eof_modes must be positive and below data.n_test".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Hash of everything that affects stored data and models. Run name,
    /// output location and ensemble size are excluded; the ensemble size is
    /// part of each prediction's shape.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_name.clear();
        c.output_dir = None;
        c.sampling.n_ensemble = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    /// `output_dir`, else `$EDM_DOWNSCALE_OUT/<run_name>`, else
    /// `runs/<run_name>`.
    pub fn run_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(&self.run_name)
            }
        }
    }
}

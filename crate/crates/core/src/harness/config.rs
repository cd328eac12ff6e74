//! Scenario configuration (TOML) and its validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{load_materials, AbsorptionTable, ChannelParams, Material};
use crate::signal::{AdcBits, CombinerMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub channel: ChannelSection,
    pub system: SystemSection,
    pub sweep: SweepSection,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub combiner: Option<CombinerSection>,
    #[serde(default)]
    pub ecdf: Option<EcdfSection>,
    #[serde(default)]
    pub rals: RalsSection,
    #[serde(default)]
    pub ml: MlSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub frequency_hz: f64,
    pub distance_m: f64,
    pub n_nlos: usize,
    pub n_ray: usize,
    pub antenna_gain_dbi: f64,
    pub spacing_over_lambda: f64,
    pub diffuse_spread_deg: f64,
    /// TOML file of `[[material]]` tables; office defaults when absent.
    pub materials_file: Option<PathBuf>,
    /// CSV `frequency_hz,k_abs_per_m`; no molecular absorption when absent.
    pub absorption_csv: Option<PathBuf>,
    /// Scale each channel to `‖H‖²_F = K`.
    pub normalize_h: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            frequency_hz: 0.3e12,
            distance_m: 15.0,
            n_nlos: 3,
            n_ray: 1,
            antenna_gain_dbi: 26.0,
            spacing_over_lambda: 0.5,
            diffuse_spread_deg: 5.0,
            materials_file: None,
            absorption_csv: None,
            normalize_h: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdcSetting {
    Bits(i64),
    Text(InfinityTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfinityTag {
    Inf,
}

impl Default for AdcSetting {
    fn default() -> Self {
        AdcSetting::Text(InfinityTag::Inf)
    }
}

impl AdcSetting {
    pub fn to_bits(self) -> Result<AdcBits, String> {
        match self {
            AdcSetting::Text(InfinityTag::Inf) => Ok(AdcBits::Infinite),
            AdcSetting::Bits(b) if (1..=16).contains(&b) => Ok(AdcBits::Finite(b as u32)),
            AdcSetting::Bits(b) => Err(format!(
                "system.adc_bits must be in 1..=16 or \"inf\", got {b}"
            )),
        }
    }
}

/// Which received blocks pass through the ADC model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdcFrames {
    /// Only the pilot block is quantized; data samples stay unquantized.
    #[default]
    Pilots,
    /// Pilot and data blocks are both quantized.
    All,
}

fn default_one() -> f64 {
    1.0
}

fn default_clip() -> f64 {
    crate::signal::DEFAULT_CLIP_SCALE
}

fn default_n_q() -> u32 {
    4
}

fn default_combiner_mode() -> CombinerMode {
    CombinerMode::UnitaryValidation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_bs: usize,
    pub k_u: usize,
    pub n_rf: usize,
    pub tau_p: usize,
    pub n_data: usize,
    #[serde(default = "default_n_q")]
    pub n_q: u32,
    #[serde(default)]
    pub adc_bits: AdcSetting,
    #[serde(default)]
    pub adc_frames: AdcFrames,
    #[serde(default = "default_clip")]
    pub clip_scale: f64,
    #[serde(default = "default_combiner_mode")]
    pub combiner_mode: CombinerMode,
    #[serde(default = "default_one")]
    pub p_p: f64,
    #[serde(default = "default_one")]
    pub p_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    SnrDb,
    TauP,
    NBs,
    NData,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::SnrDb => "snr_db",
            SweepParameter::TauP => "tau_p",
            SweepParameter::NBs => "n_bs",
            SweepParameter::NData => "n_data",
        })
    }
}

fn default_snr() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// SNR used when the swept parameter is not the SNR.
    #[serde(default = "default_snr")]
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ml,
    RalsSb,
    WdSbPerfect,
    WdSbEstimated,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ml => "ml",
            EstimatorKind::RalsSb => "rals_sb",
            EstimatorKind::WdSbPerfect => "wd_sb_perfect",
            EstimatorKind::WdSbEstimated => "wd_sb_estimated",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

fn default_s_factor() -> usize {
    2
}

fn default_em_iters() -> usize {
    200
}

fn default_em_tol() -> f64 {
    1e-4
}

fn default_floor() -> f64 {
    1e-12
}

/// Hybrid combiner design on top of every estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerSection {
    /// Dictionary size as a multiple of `n_bs`.
    #[serde(default = "default_s_factor")]
    pub s_factor: usize,
    /// Defaults to the noise variance.
    #[serde(default)]
    pub sigma_a2: Option<f64>,
    #[serde(default = "default_em_iters")]
    pub max_em_iters: usize,
    #[serde(default = "default_em_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_floor")]
    pub gamma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcdfSection {
    pub thresholds: Vec<f64>,
    /// Sweep point whose errors feed the ECDF.
    #[serde(default)]
    pub sweep_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RalsSection {
    /// Defaults to the noise variance.
    pub beta_u: Option<f64>,
    pub beta_v: Option<f64>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
    /// Score BER on the jointly estimated data symbols instead of MMSE
    /// detection with the channel estimate.
    pub direct_detection: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlSection {
    pub pseudo_inverse_combining: bool,
}

/// Every validation failure found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// System dimensions at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub snr_db: f64,
    pub n_bs: usize,
    pub tau_p: usize,
    pub n_data: usize,
}

impl SweepPoint {
    pub fn sigma2(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

/// Inputs resolved from files referenced by the configuration.
#[derive(Debug, Clone)]
pub struct Resources {
    pub materials: Vec<Material>,
    pub absorption: AbsorptionTable,
    pub adc: AdcBits,
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigErrors> {
        toml::from_str(text).map_err(|e| ConfigErrors(vec![format!("parse error: {e}")]))
    }

    /// Parse a file. Relative paths inside it are resolved against its
    /// directory.
    pub fn from_path(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("reading {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent();
        if let Some(p) = cfg.channel.materials_file.take() {
            cfg.channel.materials_file = Some(resolve(base, &p));
        }
        if let Some(p) = cfg.channel.absorption_csv.take() {
            cfg.channel.absorption_csv = Some(resolve(base, &p));
        }
        Ok(cfg)
    }

    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let s = &self.system;
        self.sweep
            .values
            .iter()
            .map(|&v| {
                let mut p = SweepPoint {
                    value: v,
                    snr_db: self.sweep.snr_db,
                    n_bs: s.n_bs,
                    tau_p: s.tau_p,
                    n_data: s.n_data,
                };
                match self.sweep.parameter {
                    SweepParameter::SnrDb => p.snr_db = v,
                    SweepParameter::TauP => p.tau_p = v as usize,
                    SweepParameter::NBs => p.n_bs = v as usize,
                    SweepParameter::NData => p.n_data = v as usize,
                }
                p
            })
            .collect()
    }

    pub fn channel_params(&self, n_bs: usize, materials: &[Material]) -> ChannelParams {
        let c = &self.channel;
        ChannelParams {
            frequency_hz: c.frequency_hz,
            distance_m: c.distance_m,
            n_nlos: c.n_nlos,
            n_ray: c.n_ray,
            antenna_gain_dbi: c.antenna_gain_dbi,
            n_bs,
            k_u: self.system.k_u,
            spacing_over_lambda: c.spacing_over_lambda,
            materials: materials.to_vec(),
            diffuse_spread: c.diffuse_spread_deg.to_radians(),
        }
    }

    /// Check every invariant, load referenced files, and report all problems
    /// at once.
    pub fn validate(&self) -> Result<Resources, ConfigErrors> {
        let mut errs = Vec::new();
        let s = &self.system;

        if self.trials < 1 {
            errs.push("trials must be >= 1".to_string());
        }
        if self.estimators.is_empty() {
            errs.push("estimators must list at least one of ml, rals_sb, wd_sb_perfect, wd_sb_estimated".into());
        }
        if self.sweep.values.is_empty() {
            errs.push("sweep.values must not be empty".into());
        }
        if !(1..=16).contains(&s.n_q) {
            errs.push(format!("system.n_q must be in 1..=16, got {}", s.n_q));
        }
        if !(s.p_p > 0.0) || !(s.p_d > 0.0) {
            errs.push(format!("system.p_p and system.p_d must be > 0, got {} and {}", s.p_p, s.p_d));
        }
        if !(s.clip_scale > 0.0) {
            errs.push(format!("system.clip_scale must be > 0, got {}", s.clip_scale));
        }
        let adc = match s.adc_bits.to_bits() {
            Ok(b) => b,
            Err(e) => {
                errs.push(e);
                AdcBits::Infinite
            }
        };
        if !self.sweep.snr_db.is_finite() {
            errs.push("sweep.snr_db must be finite".into());
        }

        for v in &self.sweep.values {
            let integral = self.sweep.parameter != SweepParameter::SnrDb;
            if !v.is_finite() || (integral && (v.fract() != 0.0 || *v < 1.0)) {
                errs.push(format!(
                    "sweep value {v} is not valid for parameter {}",
                    self.sweep.parameter
                ));
            }
        }

        let mut seen = Vec::new();
        for p in self.sweep_points() {
            let tag = if self.sweep.values.len() > 1 || self.sweep.parameter != SweepParameter::SnrDb
            {
                format!(" (at {} = {})", self.sweep.parameter, p.value)
            } else {
                String::new()
            };
            let mut local = Vec::new();
            if s.k_u < 1 {
                local.push("k_u >= 1 violated".to_string());
            }
            if p.tau_p < s.k_u {
                local.push(format!(
                    "tau_p >= k_u violated: tau_p = {}, k_u = {}",
                    p.tau_p, s.k_u
                ));
            }
            if !(s.k_u <= s.n_rf && s.n_rf <= p.n_bs) {
                local.push(format!(
                    "k_u <= n_rf <= n_bs violated: k_u = {}, n_rf = {}, n_bs = {}",
                    s.k_u, s.n_rf, p.n_bs
                ));
            } else if p.n_bs % s.n_rf != 0 {
                local.push(format!(
                    "n_bs must be divisible by n_rf: n_bs = {}, n_rf = {}",
                    p.n_bs, s.n_rf
                ));
            }
            if p.n_data < 1 {
                local.push("n_data >= 1 violated".into());
            }
            for e in local {
                let msg = format!("{e}{tag}");
                if !seen.contains(&msg) {
                    seen.push(msg.clone());
                    errs.push(msg);
                }
            }
        }

        if let Some(c) = &self.combiner {
            if c.s_factor < 1 {
                errs.push("combiner.s_factor must be >= 1".into());
            }
            if c.max_em_iters < 1 || !(c.rel_tol > 0.0) || !(c.gamma_floor > 0.0) {
                errs.push("combiner.max_em_iters, rel_tol and gamma_floor must be positive".into());
            }
            if matches!(c.sigma_a2, Some(v) if !(v > 0.0)) {
                errs.push("combiner.sigma_a2 must be > 0".into());
            }
        }
        if let Some(e) = &self.ecdf {
            if e.thresholds.is_empty() || e.thresholds.iter().any(|t| !t.is_finite()) {
                errs.push("ecdf.thresholds must be a non-empty list of finite numbers".into());
            }
            if e.sweep_index >= self.sweep.values.len().max(1) {
                errs.push(format!(
                    "ecdf.sweep_index {} is out of range for {} sweep values",
                    e.sweep_index,
                    self.sweep.values.len()
                ));
            }
        }
        let r = &self.rals;
        if matches!(r.beta_u, Some(v) if !(v > 0.0)) || matches!(r.beta_v, Some(v) if !(v > 0.0)) {
            errs.push("rals.beta_u and rals.beta_v must be > 0".into());
        }
        if r.max_iters == Some(0) || matches!(r.rel_tol, Some(v) if !(v > 0.0)) {
            errs.push("rals.max_iters and rals.rel_tol must be positive".into());
        }

        let materials = match &self.channel.materials_file {
            Some(p) => load_materials(p).unwrap_or_else(|e| {
                errs.push(format!("channel.materials_file: {e}"));
                Vec::new()
            }),
            None => Material::office_defaults(),
        };
        let absorption = match &self.channel.absorption_csv {
            Some(p) => AbsorptionTable::from_csv_path(p).unwrap_or_else(|e| {
                errs.push(format!("channel.absorption_csv: {e}"));
                AbsorptionTable::empty()
            }),
            None => AbsorptionTable::empty(),
        };
        if let Err(e) = absorption.k_abs(self.channel.frequency_hz) {
            errs.push(format!("channel: {e}"));
        }
        // Dimensions were checked above; validate only the propagation fields.
        let mut params = self.channel_params(1, &materials);
        params.k_u = 1;
        if let Err(e) = params.validate() {
            errs.push(format!("channel: {e}"));
        }

        if errs.is_empty() {
            Ok(Resources {
                materials,
                absorption,
                adc,
            })
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

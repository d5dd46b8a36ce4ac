//! Run configuration: a flat TOML document with dotted section keys
//! (`grid.N = 128`, `noise.K = 8`, ...). Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::experiments::{exact_ratio, CommutingOracle, Problem, Reference, TestFunctional};
use crate::grid::{make_grid, StateVector};
use crate::noise::{build_noise, damping_margin, DampingProfile};
use crate::stepper::{Nonlinearity, DEFAULT_FP_MAX_ITERS, DEFAULT_FP_TOL};

/// Decay exponent floor for experiments that need `Q^{1/2} ∈ L₂⁴`
/// (`Σ q_k (1 + k²)⁴` summable).
pub const WEAK_ORDER_MIN_DECAY: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: Some(key.to_string()),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The experiment a configuration is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Simulate,
    DecayCheck,
    StrongOrder,
    WeakOrder,
    Horizon,
    ExpMoment,
}

impl Purpose {
    pub fn name(self) -> &'static str {
        match self {
            Purpose::Simulate => "simulate",
            Purpose::DecayCheck => "decay-check",
            Purpose::StrongOrder => "strong-order",
            Purpose::WeakOrder => "weak-order",
            Purpose::Horizon => "horizon",
            Purpose::ExpMoment => "exp-moment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "L", default = "default_half_length")]
    pub half_length: f64,
    #[serde(rename = "N", default = "default_points")]
    pub num_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(rename = "K", default = "default_modes")]
    pub mode_count: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "default_decay")]
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingKind {
    /// `α = a₀ + ½F_Q`.
    ConstantPlusHalfFq,
    /// `α = ½F_Q`.
    Conservative,
    /// `α` read from a table with one value per grid point.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSection {
    #[serde(default = "default_damping_kind")]
    pub kind: DampingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    /// Path of the custom table, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub tau: f64,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub final_time: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: i64,
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_fp_max_iters")]
    pub fp_max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// `A·exp(−x²/(2w²))`.
    GaussianBump,
    /// `A·e^{ikx}` with `k` a resolved grid wavenumber.
    PlaneWave,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default = "default_initial_kind")]
    pub kind: InitialKind,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default)]
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Fine,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub tau_list: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_ref: Option<f64>,
    #[serde(default = "default_reference")]
    pub reference: ReferenceKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_phi")]
    pub phi: String,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub horizons: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
    #[serde(default = "default_horizon_ratio")]
    pub max_horizon_ratio: f64,
    #[serde(default = "default_moment_growth")]
    pub moment_growth_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_tolerance: Option<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("all experiment keys have defaults")
    }
}

/// The document as written (with defaults filled in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default = "default_grid")]
    pub grid: GridSection,
    #[serde(default = "default_noise")]
    pub noise: NoiseSection,
    #[serde(default = "default_damping")]
    pub damping: DampingSection,
    pub scheme: SchemeSection,
    #[serde(default = "default_initial")]
    pub initial: InitialSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_half_length() -> f64 {
    16.0
}
fn default_points() -> usize {
    128
}
fn default_modes() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    3.0
}
fn default_damping_kind() -> DampingKind {
    DampingKind::ConstantPlusHalfFq
}
fn default_lambda() -> i64 {
    -1
}
fn default_fp_tol() -> f64 {
    DEFAULT_FP_TOL
}
fn default_fp_max_iters() -> usize {
    DEFAULT_FP_MAX_ITERS
}
fn default_initial_kind() -> InitialKind {
    InitialKind::GaussianBump
}
fn default_width() -> f64 {
    2.0
}
fn default_reference() -> ReferenceKind {
    ReferenceKind::Fine
}
fn default_samples() -> usize {
    100
}
fn default_phi() -> String {
    "exp_neg_charge".into()
}
fn default_record_every() -> usize {
    1
}
fn default_horizon_ratio() -> f64 {
    2.0
}
fn default_moment_growth() -> f64 {
    0.1
}
fn default_output_dir() -> String {
    "out".into()
}
fn default_grid() -> GridSection {
    GridSection {
        half_length: default_half_length(),
        num_points: default_points(),
    }
}
fn default_noise() -> NoiseSection {
    NoiseSection {
        mode_count: default_modes(),
        amplitude: 1.0,
        r: default_decay(),
    }
}
fn default_damping() -> DampingSection {
    DampingSection {
        kind: default_damping_kind(),
        a0: None,
        table: None,
    }
}
fn default_initial() -> InitialSection {
    InitialSection {
        kind: default_initial_kind(),
        amplitude: 1.0,
        width: default_width(),
        k: 0.0,
    }
}

/// Default damping margin for `constant_plus_half_fq`.
pub const DEFAULT_A0: f64 = 0.5;

/// A validated configuration together with everything derived from it.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub purpose: Purpose,
    pub problem: Problem,
    pub tau: f64,
    pub steps: usize,
    /// Set for the convergence studies.
    pub reference: Option<Reference>,
    pub phi: TestFunctional,
    /// SHA-256 of the config file bytes.
    pub config_sha256: String,
}

impl RunConfig {
    pub fn margin(&self) -> f64 {
        self.problem.damping.margin()
    }

    /// Slope acceptance window: configured, or the subcommand's default.
    pub fn slope_window(&self) -> (f64, f64) {
        let (lo, hi) = match (self.purpose, self.reference) {
            (_, Some(Reference::Exact { .. })) => (1.5, f64::INFINITY),
            (Purpose::WeakOrder, _) => (0.75, 1.25),
            _ => (0.35, 0.65),
        };
        (
            self.raw.experiment.slope_min.unwrap_or(lo),
            self.raw.experiment.slope_max.unwrap_or(hi),
        )
    }

    pub fn decay_tolerance(&self) -> f64 {
        self.raw
            .experiment
            .decay_tolerance
            .unwrap_or_else(|| crate::monitors::default_decay_tolerance(self.steps))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads, parses and validates the configuration at `path` for `purpose`.
pub fn parse_config(path: &Path, purpose: Purpose) -> Result<RunConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError {
        key: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| ConfigError {
        key: None,
        message: format!("{} is not valid UTF-8", path.display()),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base, purpose).map(|mut c| {
        c.config_sha256 = sha256_hex(&bytes);
        c
    })
}

/// Parses configuration text; relative table paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path, purpose: Purpose) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError {
        key: None,
        message: e.to_string().trim_end().to_string(),
    })?;
    validate(raw, base_dir, purpose, sha256_hex(text.as_bytes()))
}

fn lib_err(key: &str) -> impl Fn(Error) -> ConfigError + '_ {
    move |e| ConfigError::at(key, e.to_string())
}

fn read_table(path: &Path, expected: usize) -> Result<Vec<f64>, ConfigError> {
    let key = "damping.table";
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::at(key, format!("cannot read {}: {e}", path.display())))?;
    let values = text
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>()
                .map_err(|_| ConfigError::at(key, format!("entry {i} ('{tok}') is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(ConfigError::at(
            key,
            format!("table has {} values, grid.N = {expected}", values.len()),
        ));
    }
    Ok(values)
}

fn validate(raw: RawConfig, base_dir: &Path, purpose: Purpose, sha: String) -> Result<RunConfig, ConfigError> {
    let g = &raw.grid;
    let grid = make_grid(g.half_length, g.num_points).map_err(lib_err("grid"))?;

    let n = &raw.noise;
    if n.mode_count > g.num_points / 4 {
        return Err(ConfigError::at(
            "noise.K",
            format!(
                "K = {} exceeds N/4 = {} (aliasing guard)",
                n.mode_count,
                g.num_points / 4
            ),
        ));
    }
    if purpose == Purpose::WeakOrder && n.r < WEAK_ORDER_MIN_DECAY {
        return Err(ConfigError::at(
            "noise.r",
            format!(
                "r = {} is too small for weak-order runs, which need Q^(1/2) in L2^4 \
                 (r >= {WEAK_ORDER_MIN_DECAY})",
                n.r
            ),
        ));
    }
    let noise = build_noise(grid.clone(), n.mode_count, n.amplitude, n.r).map_err(lib_err("noise"))?;

    let d = &raw.damping;
    let damping = match d.kind {
        DampingKind::ConstantPlusHalfFq => {
            if d.table.is_some() {
                return Err(ConfigError::at("damping.table", "only valid with kind = \"custom\""));
            }
            let a0 = d.a0.unwrap_or(DEFAULT_A0);
            if !a0.is_finite() {
                return Err(ConfigError::at("damping.a0", "must be finite"));
            }
            DampingProfile::constant_plus_half_fq(&noise, a0)
        }
        DampingKind::Conservative => {
            if d.a0.is_some_and(|a| a != 0.0) {
                return Err(ConfigError::at("damping.a0", "conservative damping has margin 0"));
            }
            if d.table.is_some() {
                return Err(ConfigError::at("damping.table", "only valid with kind = \"custom\""));
            }
            DampingProfile::conservative(&noise)
        }
        DampingKind::Custom => {
            if d.a0.is_some() {
                return Err(ConfigError::at("damping.a0", "not used with kind = \"custom\""));
            }
            let rel = d
                .table
                .as_ref()
                .ok_or_else(|| ConfigError::at("damping.table", "required for kind = \"custom\""))?;
            let path: PathBuf = base_dir.join(rel);
            damping_margin(read_table(&path, g.num_points)?, &noise)
        }
    }
    .map_err(lib_err("damping"))?;

    let s = &raw.scheme;
    if !(s.tau > 0.0 && s.tau.is_finite()) {
        return Err(ConfigError::at("scheme.tau", format!("must be positive, got {}", s.tau)));
    }
    let steps = match (s.steps, s.final_time) {
        (Some(m), None) => m,
        (None, Some(t)) => exact_ratio(t, s.tau).ok_or_else(|| {
            ConfigError::at("scheme.T", format!("T = {t} is not a multiple of tau = {}", s.tau))
        })?,
        (Some(m), Some(t)) => {
            if exact_ratio(t, s.tau) != Some(m) {
                return Err(ConfigError::at(
                    "scheme.T",
                    format!("T = {t} is inconsistent with M = {m} and tau = {}", s.tau),
                ));
            }
            m
        }
        (None, None) => return Err(ConfigError::at("scheme.M", "one of scheme.M or scheme.T is required")),
    };
    let final_time = steps as f64 * s.tau;
    let nonlinearity = Nonlinearity::try_from(s.lambda).map_err(lib_err("scheme.lambda"))?;
    if !(s.fp_tol > 0.0) {
        return Err(ConfigError::at("scheme.fp_tol", "must be positive"));
    }
    if s.fp_max_iters == 0 {
        return Err(ConfigError::at("scheme.fp_max_iters", "must be at least 1"));
    }

    let i = &raw.initial;
    let initial = match i.kind {
        InitialKind::GaussianBump => {
            if !(i.width > 0.0) {
                return Err(ConfigError::at("initial.width", "must be positive"));
            }
            let (a, w) = (i.amplitude, i.width);
            StateVector::from_fn(grid.clone(), |x| Complex64::new(a * (-x * x / (2.0 * w * w)).exp(), 0.0))
        }
        InitialKind::PlaneWave => {
            if !grid.resolves(i.k) {
                return Err(ConfigError::at(
                    "initial.k",
                    format!("k = {} is not a resolved wavenumber of the grid (multiples of pi/L below the Nyquist index)", i.k),
                ));
            }
            StateVector::plane_wave(grid.clone(), Complex64::new(i.amplitude, 0.0), i.k)
        }
        InitialKind::Zero => StateVector::zeros(grid.clone()),
    };
    if !initial.is_finite() {
        return Err(ConfigError::at("initial.amplitude", "must be finite"));
    }

    let e = &raw.experiment;
    let phi: TestFunctional = e.phi.parse().map_err(lib_err("experiment.phi"))?;
    if e.record_every == 0 {
        return Err(ConfigError::at("experiment.record_every", "must be at least 1"));
    }
    if !(e.beta > 0.0) {
        return Err(ConfigError::at("experiment.beta", "must be positive"));
    }
    if let (Some(lo), Some(hi)) = (e.slope_min, e.slope_max) {
        if lo > hi {
            return Err(ConfigError::at("experiment.slope_min", "exceeds experiment.slope_max"));
        }
    }

    let problem = Problem {
        noise,
        damping,
        nonlinearity,
        fp_tol: s.fp_tol,
        fp_max_iters: s.fp_max_iters,
        initial,
        final_time,
        master_seed: raw.master_seed,
    };

    let mut reference = None;
    match purpose {
        Purpose::StrongOrder | Purpose::WeakOrder | Purpose::Horizon => {
            if e.samples < crate::experiments::MIN_STUDY_SAMPLES {
                return Err(ConfigError::at(
                    "experiment.samples",
                    format!("at least {} samples are required", crate::experiments::MIN_STUDY_SAMPLES),
                ));
            }
            let tau_ref = e
                .tau_ref
                .ok_or_else(|| ConfigError::at("experiment.tau_ref", "required for convergence studies"))?;
            if !(tau_ref > 0.0) {
                return Err(ConfigError::at("experiment.tau_ref", "must be positive"));
            }
            let taus: Vec<f64> = if purpose == Purpose::Horizon {
                vec![s.tau]
            } else {
                if e.tau_list.is_empty() {
                    return Err(ConfigError::at("experiment.tau_list", "must not be empty"));
                }
                e.tau_list.clone()
            };
            for &t in &taus {
                if exact_ratio(t, tau_ref).is_none_or(|r| r == 0) {
                    return Err(ConfigError::at(
                        "experiment.tau_list",
                        format!("entry {t} is not divisible by tau_ref = {tau_ref}"),
                    ));
                }
                if purpose != Purpose::Horizon && exact_ratio(final_time, t).is_none() {
                    return Err(ConfigError::at(
                        "experiment.tau_list",
                        format!("entry {t} does not divide T = {final_time}"),
                    ));
                }
            }
            reference = Some(match e.reference {
                ReferenceKind::Fine => {
                    let min = taus.iter().copied().fold(f64::INFINITY, f64::min);
                    if tau_ref > min / 8.0 * (1.0 + 1e-12) {
                        return Err(ConfigError::at(
                            "experiment.tau_ref",
                            format!("fine reference step {tau_ref} must be at most min(tau)/8 = {}", min / 8.0),
                        ));
                    }
                    Reference::Fine { tau: tau_ref }
                }
                ReferenceKind::Exact => {
                    CommutingOracle::from_problem(&problem).map_err(lib_err("experiment.reference"))?;
                    Reference::Exact { tau: tau_ref }
                }
            });
            if purpose == Purpose::Horizon {
                if e.horizons.is_empty() {
                    return Err(ConfigError::at("experiment.horizons", "must not be empty"));
                }
                if e.horizons.windows(2).any(|w| w[1] <= w[0]) || e.horizons[0] <= 0.0 {
                    return Err(ConfigError::at("experiment.horizons", "must be positive and increasing"));
                }
                for &h in &e.horizons {
                    if exact_ratio(h, s.tau).is_none() || exact_ratio(h, tau_ref).is_none() {
                        return Err(ConfigError::at(
                            "experiment.horizons",
                            format!("horizon {h} is not a multiple of scheme.tau and experiment.tau_ref"),
                        ));
                    }
                }
            }
        }
        Purpose::DecayCheck | Purpose::ExpMoment => {
            if e.samples == 0 {
                return Err(ConfigError::at("experiment.samples", "must be at least 1"));
            }
        }
        Purpose::Simulate => {}
    }

    Ok(RunConfig {
        purpose,
        problem,
        tau: s.tau,
        steps,
        reference,
        phi,
        config_sha256: sha,
        raw,
    })
}

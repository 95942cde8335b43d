//! Versioned JSON configuration: single scenarios, sweeps over scenario
//! variants, and benchmark sets.
//!
//! Every file carries `"version": 1` and a `"kind"` of `scenario`, `sweep`
//! or `bench`. Unknown keys are rejected. Relative paths resolve against the
//! directory of the file that names them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::explicit::{ExploreSettings, ThetaBox};
use crate::model::NdcParams;
use crate::mpqp::MpcConfig;
use crate::runtime::{ControllerKind, Feedback, NoiseSpec, Schedule};
use crate::segments::{default_breakpoints, Breakpoint};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn invalid(path: &Path, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// A value given inline or as a path to a JSON file holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ref<T> {
    Path(PathBuf),
    Inline(T),
}

impl<T: for<'de> Deserialize<'de> + Clone> Ref<T> {
    pub fn resolve(&self, base_dir: &Path) -> Result<T, ConfigError> {
        match self {
            Ref::Inline(v) => Ok(v.clone()),
            Ref::Path(p) => {
                let path = base_dir.join(p);
                let text = read(&path)?;
                serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path, source })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub process_var: f64,
    pub measurement_var: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let n = NoiseSpec::default();
        Self {
            enabled: n.enabled,
            process_var: n.process_var,
            measurement_var: n.measurement_var,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    /// Error added to the true initial state for the initial estimate.
    pub initial_error: [f64; 3],
    pub p0: f64,
    pub current_var: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            initial_error: [0.0; 3],
            p0: 1e-6,
            current_var: 1e-12,
        }
    }
}

/// Offline synthesis options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub theta_box: ThetaBox,
    pub epsilon: f64,
    pub perturbation: f64,
    pub max_retries: usize,
    pub coverage_samples: usize,
    pub coverage_target: f64,
    pub max_regions: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let e = ExploreSettings::default();
        Self {
            theta_box: ThetaBox::default(),
            epsilon: e.epsilon,
            perturbation: e.perturbation,
            max_retries: e.max_retries,
            coverage_samples: e.coverage_samples,
            coverage_target: e.coverage_target,
            max_regions: e.max_regions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    /// Seeds the plant noise; synthesis sampling uses `seed + 1`.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Ref<NdcParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Ref<Vec<Breakpoint>>>,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    #[serde(default = "default_feedback")]
    pub feedback: Feedback,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ekf: EkfConfig,
    #[serde(default = "default_soc_start")]
    pub soc_start: f64,
    #[serde(default = "default_soc_target")]
    pub soc_target: f64,
    #[serde(default = "default_margin")]
    pub completion_margin: f64,
    #[serde(default = "default_budget")]
    pub step_budget: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default = "default_nmpc_iters")]
    pub nmpc_max_iters: usize,
    /// Lookup tables for the explicit controller: a directory of segment
    /// files or one table file. Synthesized in memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<PathBuf>,
    /// Round table entries to this many decimals before use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_rounding: Option<i32>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_controller() -> ControllerKind {
    ControllerKind::Empc
}
fn default_feedback() -> Feedback {
    Feedback::State
}
fn default_soc_start() -> f64 {
    0.2
}
fn default_soc_target() -> f64 {
    0.9
}
fn default_margin() -> f64 {
    0.005
}
fn default_budget() -> usize {
    150
}
fn default_dt() -> f64 {
    60.0
}
fn default_nmpc_iters() -> usize {
    10
}

impl Scenario {
    /// The basic charging case with all defaults.
    pub fn basic(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({
            "version": CONFIG_VERSION, "name": "basic", "seed": seed
        }))
        .expect("defaults deserialize")
    }

    pub fn params(&self) -> Result<NdcParams, ConfigError> {
        match &self.params {
            Some(r) => r.resolve(&self.base_dir),
            None => Ok(NdcParams::default()),
        }
    }

    pub fn breakpoints(&self) -> Result<Vec<Breakpoint>, ConfigError> {
        match &self.segments {
            Some(r) => r.resolve(&self.base_dir),
            None => Ok(default_breakpoints()),
        }
    }

    pub fn explore_settings(&self) -> ExploreSettings {
        let s = &self.synthesis;
        ExploreSettings {
            epsilon: s.epsilon,
            perturbation: s.perturbation,
            max_retries: s.max_retries,
            coverage_samples: s.coverage_samples,
            coverage_target: s.coverage_target,
            seed: self.seed.wrapping_add(1),
            max_regions: s.max_regions,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            enabled: self.noise.enabled,
            seed: self.seed,
            process_var: self.noise.process_var,
            measurement_var: self.noise.measurement_var,
        }
    }

    pub fn tables_path(&self) -> Option<PathBuf> {
        self.tables.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(path, format!("unsupported version {}", self.version)));
        }
        let checks = [
            (self.dt > 0.0 && self.dt.is_finite(), "dt must be positive"),
            ((0.0..=1.0).contains(&self.soc_start), "soc_start must be in [0, 1]"),
            ((0.0..=1.0).contains(&self.soc_target), "soc_target must be in [0, 1]"),
            (self.soc_start < self.soc_target, "soc_start must be below soc_target"),
            (self.step_budget >= 1, "step_budget must be >= 1"),
            (self.nmpc_max_iters >= 1, "nmpc_max_iters must be >= 1"),
            (self.synthesis.theta_box.is_valid(), "synthesis.theta_box must be bounded with lo < hi"),
            (
                self.noise.process_var >= 0.0 && self.noise.measurement_var >= 0.0,
                "noise variances must be >= 0",
            ),
        ];
        for (ok, reason) in checks {
            if !ok {
                return Err(invalid(path, reason));
            }
        }
        self.mpc.validate().map_err(|e| invalid(path, e.to_string()))?;
        let params = self.params()?;
        params.validate().map_err(|e| invalid(path, e.to_string()))?;
        let bp = self.breakpoints()?;
        if bp.is_empty() {
            return Err(invalid(path, "segments must not be empty"));
        }
        if let Some(t) = self.tables_path() {
            if !t.exists() {
                return Err(invalid(path, format!("tables path {} does not exist", t.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Keys merged over the base scenario.
    #[serde(default)]
    pub set: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub name: String,
    /// Expanded variants; the first is the reference for deviations.
    pub scenarios: Vec<Scenario>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    version: u32,
    name: String,
    base: PathBuf,
    variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSet {
    pub name: String,
    pub repeats: usize,
    pub controllers: Vec<ControllerKind>,
    pub scenarios: Vec<Scenario>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    version: u32,
    name: String,
    #[serde(default = "default_repeats")]
    repeats: usize,
    #[serde(default = "default_bench_controllers")]
    controllers: Vec<ControllerKind>,
    /// Paths to scenario or sweep files.
    scenarios: Vec<PathBuf>,
}

fn default_repeats() -> usize {
    20
}
fn default_bench_controllers() -> Vec<ControllerKind> {
    vec![ControllerKind::Empc, ControllerKind::Nmpc]
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    Scenario(Scenario),
    Sweep(Sweep),
    Bench(BenchSet),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_value(path: &Path) -> Result<serde_json::Map<String, Value>, ConfigError> {
    let text = read(path)?;
    match serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })? {
        Value::Object(map) => Ok(map),
        _ => Err(invalid(path, "expected a JSON object")),
    }
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Recursively merges `patch` into `base`; objects merge key by key, all
/// other values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn scenario_from(map: serde_json::Map<String, Value>, path: &Path) -> Result<Scenario, ConfigError> {
    let mut s: Scenario = serde_json::from_value(Value::Object(map)).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    s.base_dir = dir_of(path);
    s.validate(path)?;
    Ok(s)
}

fn take_kind(map: &mut serde_json::Map<String, Value>, path: &Path) -> Result<String, ConfigError> {
    match map.remove("kind") {
        Some(Value::String(k)) => Ok(k),
        Some(_) => Err(invalid(path, "`kind` must be a string")),
        None => Err(invalid(path, "missing `kind` (scenario, sweep or bench)")),
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    match load(path)? {
        ConfigFile::Scenario(s) => Ok(s),
        _ => Err(invalid(path, "expected a scenario file")),
    }
}

/// Loads a scenario file, or expands a sweep file into its scenarios.
pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, ConfigError> {
    match load(path)? {
        ConfigFile::Scenario(s) => Ok(vec![s]),
        ConfigFile::Sweep(s) => Ok(s.scenarios),
        ConfigFile::Bench(_) => Err(invalid(path, "expected a scenario or sweep file")),
    }
}

pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
    let mut map = read_value(path)?;
    let kind = take_kind(&mut map, path)?;
    let parse_err = |source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    };
    match kind.as_str() {
        "scenario" => scenario_from(map, path).map(ConfigFile::Scenario),
        "sweep" => {
            let file: SweepFile = serde_json::from_value(Value::Object(map)).map_err(parse_err)?;
            if file.version != CONFIG_VERSION {
                return Err(invalid(path, format!("unsupported version {}", file.version)));
            }
            if file.variants.is_empty() {
                return Err(invalid(path, "a sweep needs at least one variant"));
            }
            let base_path = dir_of(path).join(&file.base);
            let mut base = read_value(&base_path)?;
            if take_kind(&mut base, &base_path)? != "scenario" {
                return Err(invalid(&base_path, "sweep base must be a scenario"));
            }
            let scenarios = file
                .variants
                .iter()
                .map(|v| {
                    let mut value = Value::Object(base.clone());
                    merge(&mut value, &Value::Object(v.set.clone()));
                    let Value::Object(mut m) = value else { unreachable!() };
                    m.insert("name".into(), Value::String(v.name.clone()));
                    scenario_from(m, &base_path)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ConfigFile::Sweep(Sweep {
                name: file.name,
                scenarios,
            }))
        }
        "bench" => {
            let file: BenchFile = serde_json::from_value(Value::Object(map)).map_err(parse_err)?;
            if file.version != CONFIG_VERSION {
                return Err(invalid(path, format!("unsupported version {}", file.version)));
            }
            if file.repeats == 0 || file.controllers.is_empty() || file.scenarios.is_empty() {
                return Err(invalid(path, "repeats, controllers and scenarios must be non-empty"));
            }
            let mut scenarios = vec![];
            for p in &file.scenarios {
                scenarios.extend(load_scenarios(&dir_of(path).join(p))?);
            }
            Ok(ConfigFile::Bench(BenchSet {
                name: file.name,
                repeats: file.repeats,
                controllers: file.controllers,
                scenarios,
            }))
        }
        other => Err(invalid(path, format!("unknown kind `{other}`"))),
    }
}

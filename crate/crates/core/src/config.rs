//! JSON run configuration.
//!
//! ```json
//! {
//!   "model":  { "preset": "double_well.case2" },
//!   "scheme": { "kind": "taming_milstein", "taming": "tanh", "dt": 0.015625, "T": 1.0, "N": 100 },
//!   "experiment": { "ref_dt": 0.000244140625, "seeds": [1, 2, 3] },
//!   "io": { "output_dir": "out" },
//!   "seed": 1
//! }
//! ```
//!
//! Parsing materialises every default, and [`RunConfig::to_json`] writes the
//! resolved form back out; feeding that echo to the parser reproduces the
//! same configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::brownian::DEFAULT_K;
use crate::engine::{SchemeConfig, SchemeKind, DEFAULT_BLOW_UP_THRESHOLD, DEFAULT_CROSS_N_CEILING};
use crate::error::{Error, Result};
use crate::experiments::{MseMode, SchemeVariant};
use crate::models::{CuckerSmale, DoubleWell, FitzHughNagumo, InitialLaw, LinearBenchmark, Model, ModelSpec};
use crate::taming::{TamingKind, TamingSlot, TamingSpec};

pub const DEFAULT_OUTPUT_DIR: &str = "out";

/// Environment variable that overrides `io.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MVMILSTEIN_OUTPUT_DIR";

pub const PRESETS: &[&str] = &[
    "double_well.case1",
    "double_well.case2",
    "cucker_smale.case1",
    "cucker_smale.case2",
    "fitzhugh_nagumo",
    "linear_benchmark",
];

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        config_err(path, e.into_inner().to_string())
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    scheme: RawScheme,
    #[serde(default)]
    experiment: Option<Value>,
    #[serde(default)]
    io: Option<Value>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    params: Option<Map<String, Value>>,
    #[serde(default)]
    initial_law: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    kind: SchemeKind,
    #[serde(default)]
    taming: Option<Value>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    dt_list: Option<Vec<f64>>,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(default)]
    include_measure_term: bool,
    #[serde(rename = "K", default = "default_k")]
    k: usize,
    #[serde(default = "default_threshold")]
    blow_up_threshold: f64,
    #[serde(default = "default_ceiling")]
    cross_n_ceiling: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_threshold() -> f64 {
    DEFAULT_BLOW_UP_THRESHOLD
}

fn default_ceiling() -> usize {
    DEFAULT_CROSS_N_CEILING
}

/// Resolved model block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelBlock {
    pub name: String,
    pub params: Value,
    pub initial_law: InitialLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeBlock {
    pub kind: SchemeKind,
    pub taming: TamingSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_list: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub include_measure_term: bool,
    #[serde(rename = "K")]
    pub k: usize,
    pub blow_up_threshold: f64,
    pub cross_n_ceiling: usize,
}

/// Optional acceptance checks; a failed check makes the command exit with
/// status 2.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_moment_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_blown_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_blown_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_near_fraction: Option<f64>,
}

impl Checks {
    pub fn is_empty(&self) -> bool {
        *self == Checks::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    /// Schemes compared by `converge`; defaults to the scheme block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schemes: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub mse_mode: MseMode,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_dt_grid")]
    pub dt_grid: Vec<f64>,
    #[serde(default = "default_magnitude")]
    pub magnitude_range: f64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<TamingKind>,
    #[serde(default = "default_fd_trials")]
    pub fd_trials: usize,
    #[serde(default = "default_fd_tol")]
    pub fd_tol: f64,
    /// Centres for the `probe` near-fraction statistic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Checks::is_empty")]
    pub checks: Checks,
}

fn default_p() -> f64 {
    4.0
}
fn default_samples() -> usize {
    100_000
}
fn default_dt_grid() -> Vec<f64> {
    (4..=10).map(|k| 2f64.powi(-k)).collect()
}
fn default_magnitude() -> f64 {
    1e6
}
fn default_kinds() -> Vec<TamingKind> {
    vec![TamingKind::Tanh, TamingKind::Sine, TamingKind::Tamed]
}
fn default_fd_trials() -> usize {
    100
}
fn default_fd_tol() -> f64 {
    1e-5
}
fn default_radius() -> f64 {
    0.5
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        from_value(Value::Object(Map::new()), "experiment").expect("empty experiment block")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoBlock {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Output times for `simulate`; empty means `0` and `T`.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Store per-cell timings in convergence records. Timings differ between
    /// runs, so outputs are only byte-reproducible with this off.
    #[serde(default)]
    pub record_wallclock: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(DEFAULT_OUTPUT_DIR)
}

impl Default for IoBlock {
    fn default() -> Self {
        Self {
            output_dir: default_output_dir(),
            snapshot_times: Vec::new(),
            record_wallclock: false,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub scheme: SchemeBlock,
    pub experiment: ExperimentBlock,
    pub io: IoBlock,
    pub seed: u64,
    #[serde(skip)]
    spec: ModelSpec,
}

fn preset(name: &str) -> Option<(Model, InitialLaw)> {
    Some(match name {
        "double_well.case1" => (Model::DoubleWell(DoubleWell::case1()), DoubleWell::case1_initial_law()),
        "double_well.case2" => (Model::DoubleWell(DoubleWell::case2()), DoubleWell::case2_initial_law()),
        "cucker_smale.case1" => (Model::CuckerSmale(CuckerSmale::case1()), CuckerSmale::case1_initial_law()),
        "cucker_smale.case2" => (Model::CuckerSmale(CuckerSmale::case2()), CuckerSmale::case2_initial_law()),
        "fitzhugh_nagumo" | "fitzhugh_nagumo.default" => (
            Model::FitzHughNagumo(FitzHughNagumo::default()),
            FitzHughNagumo::initial_law(),
        ),
        "linear_benchmark" | "linear_benchmark.default" => (
            Model::LinearBenchmark(LinearBenchmark::default()),
            InitialLaw::PointMass { at: vec![1.0] },
        ),
        _ => return None,
    })
}

fn model_params(model: &Model) -> Value {
    match model {
        Model::DoubleWell(p) => serde_json::to_value(p),
        Model::CuckerSmale(p) => serde_json::to_value(p),
        Model::FitzHughNagumo(p) => serde_json::to_value(p),
        Model::LinearBenchmark(p) => serde_json::to_value(p),
    }
    .expect("parameter structs serialise")
}

fn build_model(name: &str, params: Value) -> Result<Model> {
    Ok(match name {
        "double_well" => Model::DoubleWell(from_value(params, "model.params")?),
        "cucker_smale" => Model::CuckerSmale(from_value(params, "model.params")?),
        "fitzhugh_nagumo" => Model::FitzHughNagumo(from_value(params, "model.params")?),
        "linear_benchmark" => Model::LinearBenchmark(from_value(params, "model.params")?),
        other => return Err(config_err("model.name", format!("unknown model `{other}`"))),
    })
}

fn resolve_model(raw: RawModel) -> Result<(ModelBlock, ModelSpec)> {
    let full_preset = match (&raw.name, &raw.preset) {
        (_, Some(p)) if p.contains('.') => Some(p.clone()),
        (Some(n), Some(p)) => Some(format!("{n}.{p}")),
        (None, Some(p)) => Some(p.clone()),
        _ => None,
    };
    let base = match &full_preset {
        Some(p) => Some(preset(p).ok_or_else(|| {
            config_err("model.preset", format!("unknown preset `{p}`; available: {}", PRESETS.join(", ")))
        })?),
        None => None,
    };
    let name = match (&raw.name, &base) {
        (Some(n), Some((m, _))) if n != m.name() => {
            return Err(config_err("model.name", format!("`{n}` does not match preset model `{}`", m.name())))
        }
        (Some(n), _) => n.clone(),
        (None, Some((m, _))) => m.name().to_string(),
        (None, None) => return Err(config_err("model", "needs `name` or `preset`")),
    };
    let defaults = match (&base, name.as_str()) {
        (Some((m, law)), _) => Some((model_params(m), Some(law.clone()))),
        (None, "fitzhugh_nagumo") => Some((
            model_params(&Model::FitzHughNagumo(FitzHughNagumo::default())),
            Some(FitzHughNagumo::initial_law()),
        )),
        (None, "linear_benchmark") => Some((
            model_params(&Model::LinearBenchmark(LinearBenchmark::default())),
            Some(InitialLaw::PointMass { at: vec![1.0] }),
        )),
        _ => None,
    };
    let mut params = match &defaults {
        Some((Value::Object(m), _)) => m.clone(),
        _ => Map::new(),
    };
    if let Some(user) = raw.params {
        params.extend(user);
    }
    let model = build_model(&name, Value::Object(params))?;
    let initial_law = match (raw.initial_law, defaults.and_then(|d| d.1)) {
        (Some(v), _) => from_value(v, "model.initial_law")?,
        (None, Some(law)) => law,
        (None, None) => return Err(config_err("model.initial_law", "required when no preset is given")),
    };
    let spec = ModelSpec::new(model.clone(), initial_law.clone()).map_err(|e| config_err("model", e.to_string()))?;
    Ok((
        ModelBlock {
            name,
            params: model_params(&model),
            initial_law,
        },
        spec,
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlot {
    kind: String,
    #[serde(default)]
    zeta: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    gamma: Option<f64>,
}

fn parse_kind(s: &str, path: &str) -> Result<TamingKind> {
    TamingKind::from_name(s).ok_or_else(|| {
        config_err(path, format!("unknown taming kind `{s}`; expected identity, tanh, sine or tamed"))
    })
}

/// Accepts a kind name for all four slots, a family label (`TanhM`, `SineM`,
/// `TameM`, `MixM`), a list of four kind names, or `{"slots": [...]}` with
/// optional exponents per slot.
pub fn parse_taming(value: &Value, path: &str) -> Result<TamingSpec> {
    match value {
        Value::String(s) => match s.as_str() {
            "TanhM" => Ok(TamingSpec::tanh()),
            "SineM" => Ok(TamingSpec::sine()),
            "TameM" => Ok(TamingSpec::tamed()),
            "MixM" | "mixed" => Ok(TamingSpec::mixed()),
            other => Ok(TamingSpec::uniform(parse_kind(other, path)?)),
        },
        Value::Array(items) => {
            if items.len() != 4 {
                return Err(config_err(path, "needs exactly four slots"));
            }
            let mut kinds = [TamingKind::Identity; 4];
            for (l, item) in items.iter().enumerate() {
                let p = format!("{path}[{l}]");
                let s = item.as_str().ok_or_else(|| config_err(&p, "expected a kind name"))?;
                kinds[l] = parse_kind(s, &p)?;
            }
            Ok(TamingSpec::from_kinds(kinds))
        }
        Value::Object(map) => {
            if let Some(k) = map.keys().find(|k| *k != "slots") {
                return Err(config_err(format!("{path}.{k}"), "unknown field"));
            }
            let slots = map
                .get("slots")
                .and_then(Value::as_array)
                .ok_or_else(|| config_err(format!("{path}.slots"), "expected an array of four slots"))?;
            if slots.len() != 4 {
                return Err(config_err(format!("{path}.slots"), "needs exactly four slots"));
            }
            let mut out = TamingSpec::identity();
            for (l, s) in slots.iter().enumerate() {
                let p = format!("{path}.slots[{l}]");
                let raw: RawSlot = from_value(s.clone(), &p)?;
                let mut slot = TamingSlot::new(parse_kind(&raw.kind, &format!("{p}.kind"))?);
                slot.zeta = raw.zeta.unwrap_or(slot.zeta);
                slot.delta = raw.delta.unwrap_or(slot.delta);
                slot.gamma = raw.gamma.unwrap_or(slot.gamma);
                out.slots[l] = slot;
            }
            out.validate().map_err(|e| config_err(path, e.to_string()))?;
            Ok(out)
        }
        _ => Err(config_err(path, "expected a kind name, a list of kinds, or {\"slots\": [...]}")),
    }
}

/// `{"kind": ..., "taming": ...}` entries of `experiment.schemes`.
fn parse_variant(value: &Value, path: &str) -> Result<SchemeVariant> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        kind: SchemeKind,
        #[serde(default)]
        taming: Option<Value>,
    }
    let raw: Raw = from_value(value.clone(), path)?;
    let taming = match raw.taming {
        Some(t) => parse_taming(&t, &format!("{path}.taming"))?,
        None => TamingSpec::identity(),
    };
    Ok(SchemeVariant { kind: raw.kind, taming })
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let raw: RawConfig = from_value(value, "config")?;
        let (model, spec) = resolve_model(raw.model)?;

        let s = raw.scheme;
        let taming = match &s.taming {
            Some(v) => parse_taming(v, "scheme.taming")?,
            None if s.kind == SchemeKind::ClassicalMilstein => TamingSpec::identity(),
            None => return Err(config_err("scheme.taming", "required for taming schemes")),
        };
        let scheme = SchemeBlock {
            kind: s.kind,
            taming,
            dt: s.dt,
            dt_list: s.dt_list,
            horizon: s.horizon,
            n: s.n,
            include_measure_term: s.include_measure_term,
            k: s.k,
            blow_up_threshold: s.blow_up_threshold,
            cross_n_ceiling: s.cross_n_ceiling,
        };
        let experiment: ExperimentBlock = match raw.experiment {
            Some(v) => from_value(v, "experiment")?,
            None => ExperimentBlock::default(),
        };
        let io: IoBlock = match raw.io {
            Some(v) => from_value(v, "io")?,
            None => IoBlock::default(),
        };
        let cfg = Self {
            model,
            scheme,
            experiment,
            io,
            seed: raw.seed,
            spec,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.scheme;
        let dts: Vec<f64> = s.dt.iter().chain(s.dt_list.iter().flatten()).copied().collect();
        let probe_dt = dts.first().copied().unwrap_or(s.horizon);
        let mut base = self.scheme_config(probe_dt);
        let wrap = |e: Error| match e {
            Error::InvalidParameter { name, reason } => config_err(name, reason),
            other => config_err("scheme", other.to_string()),
        };
        base.validate_for(s.n).map_err(wrap)?;
        for &dt in &dts {
            base.dt = dt;
            base.validate().map_err(wrap)?;
        }
        if let Some(list) = &self.experiment.schemes {
            for (i, v) in list.iter().enumerate() {
                parse_variant(v, &format!("experiment.schemes[{i}]"))?;
            }
        }
        if !(self.experiment.p >= 2.0) {
            return Err(config_err("experiment.p", "must be >= 2"));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Scheme settings at step `dt`.
    pub fn scheme_config(&self, dt: f64) -> SchemeConfig {
        let s = &self.scheme;
        SchemeConfig {
            kind: s.kind,
            taming: s.taming,
            include_measure_term: s.include_measure_term,
            dt,
            horizon: s.horizon,
            blow_up_threshold: s.blow_up_threshold,
            cross_n_ceiling: s.cross_n_ceiling,
            wiktorsson_k: s.k,
        }
    }

    pub fn single_dt(&self, command: &str) -> Result<f64> {
        self.scheme
            .dt
            .ok_or_else(|| config_err("scheme.dt", format!("`{command}` needs a single step size")))
    }

    pub fn dt_list(&self, command: &str) -> Result<Vec<f64>> {
        match (&self.scheme.dt_list, self.scheme.dt) {
            (Some(l), _) if !l.is_empty() => Ok(l.clone()),
            (_, Some(dt)) => Ok(vec![dt]),
            _ => Err(config_err("scheme.dt_list", format!("`{command}` needs a step-size grid"))),
        }
    }

    pub fn scheme_variants(&self) -> Result<Vec<SchemeVariant>> {
        match &self.experiment.schemes {
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(i, v)| parse_variant(v, &format!("experiment.schemes[{i}]")))
                .collect(),
            None => Ok(vec![SchemeVariant {
                kind: self.scheme.kind,
                taming: self.scheme.taming,
            }]),
        }
    }

    /// Resolved configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

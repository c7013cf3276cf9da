//! Subcommand dispatch shared by the command-line front end and tests.
//!
//! Every subcommand writes its data files and a JSON summary into one output
//! directory, next to an echo of the resolved configuration. The returned
//! [`Outcome`] says whether the configured checks held.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, OUTPUT_DIR_ENV};
use crate::engine::{run_simulation, write_snapshots_csv, Snapshot, SNAPSHOT_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::experiments::{
    divergence_probe, fit_by_scheme, fraction_near, moment_monitor, run_convergence_study,
    sort_records, write_records_csv, ConvergenceStudy,
};
use crate::models::{check_derivatives_fd, coercivity_spot_check};
use crate::taming::{verify_taming_assumptions, TamingKind, TamingSlot};

/// Exponent used by the informational coercivity spot check.
pub const COERCIVITY_P_BAR: f64 = 426.0;
const COERCIVITY_RADII: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
const COERCIVITY_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Converge,
    Validate,
    Moments,
    Probe,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Simulate,
        Command::Converge,
        Command::Validate,
        Command::Moments,
        Command::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Validate => "validate",
            Command::Moments => "moments",
            Command::Probe => "probe",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::param("command", format!("unknown subcommand `{s}`")))
    }
}

/// One named threshold comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: Option<f64>,
    pub limit: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_least(name: impl Into<String>, value: Option<f64>, limit: f64) -> Self {
        let passed = value.is_some_and(|v| v >= limit);
        Self { name: name.into(), value, limit, passed }
    }

    fn at_most(name: impl Into<String>, value: Option<f64>, limit: f64) -> Self {
        let passed = value.is_some_and(|v| v <= limit);
        Self { name: name.into(), value, limit, passed }
    }
}

/// Result of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

/// Output directory precedence: explicit flag, then the environment
/// variable, then `io.output_dir`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.io.output_dir.clone(),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global
/// pool when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::param("threads", "must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::param("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// Executes `command` with `config`, writing everything under `out_dir`.
pub fn execute(command: Command, config: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut resolved = config.clone();
    resolved.io.output_dir = out_dir.to_path_buf();
    let mut out = Out { dir: out_dir.to_path_buf(), files: Vec::new() };
    out.write("resolved_config.json", &(resolved.to_json() + "\n"))?;

    let (checks, summary) = match command {
        Command::Simulate => simulate(&resolved, &mut out)?,
        Command::Converge => converge(&resolved, &mut out)?,
        Command::Validate => validate(&resolved, &mut out)?,
        Command::Moments => moments(&resolved, &mut out)?,
        Command::Probe => probe(&resolved, &mut out)?,
    };
    Ok(Outcome {
        passed: checks.iter().all(|c| c.passed),
        summary,
        files: out.files,
    })
}

fn blown_fraction_checks(config: &RunConfig, fraction: f64) -> Vec<CheckResult> {
    let c = &config.experiment.checks;
    let mut v = Vec::new();
    if let Some(lim) = c.min_blown_fraction {
        v.push(CheckResult::at_least("blown_fraction", Some(fraction), lim));
    }
    if let Some(lim) = c.max_blown_fraction {
        v.push(CheckResult::at_most("blown_fraction", Some(fraction), lim));
    }
    v
}

fn simulate(config: &RunConfig, out: &mut Out) -> Result<(Vec<CheckResult>, Value)> {
    let dt = config.single_dt("simulate")?;
    let scheme = config.scheme_config(dt);
    let traj = run_simulation(config.spec(), &scheme, config.scheme.n, config.seed, &config.io.snapshot_times)?;
    write_snapshots_csv(&out.path("snapshots.csv"), &traj.snapshots)?;
    let checks = blown_fraction_checks(config, traj.divergence.fraction);
    let summary = json!({
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "model": config.spec().name(),
        "seed": config.seed,
        "N": config.scheme.n,
        "scheme": scheme,
        "taming": scheme.taming_label(),
        "snapshot_times": traj.snapshots.iter().map(|s| s.time).collect::<Vec<_>>(),
        "divergence": traj.divergence,
        "checks": checks,
    });
    out.write_json("run.json", &summary)?;
    Ok((checks, summary))
}

fn converge(config: &RunConfig, out: &mut Out) -> Result<(Vec<CheckResult>, Value)> {
    let exp = &config.experiment;
    let ref_dt = exp
        .ref_dt
        .ok_or_else(|| Error::Config { path: "experiment.ref_dt".into(), message: "`converge` needs a reference step".into() })?;
    let mut study = ConvergenceStudy::new(
        config.spec().clone(),
        config.scheme_variants()?,
        config.dt_list("converge")?,
        ref_dt,
        config.scheme.horizon,
        config.scheme.n,
        exp.seeds.clone().unwrap_or_else(|| vec![config.seed]),
    );
    study.include_measure_term = config.scheme.include_measure_term;
    study.wiktorsson_k = config.scheme.k;
    study.blow_up_threshold = config.scheme.blow_up_threshold;
    study.mse_mode = exp.mse_mode;
    study.record_wallclock = config.io.record_wallclock;

    let meta = json!({
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "model": config.spec().name(),
        "params": config.model.params,
        "schemes": study.schemes.iter().map(|s| s.label()).collect::<Vec<_>>(),
        "dt_list": study.dt_list,
        "ref_dt": study.ref_dt,
        "T": study.horizon,
        "N": study.n,
        "seeds": study.seeds,
        "K": study.wiktorsson_k,
        "include_measure_term": study.include_measure_term,
        "mse_mode": study.mse_mode,
    });
    out.write_json("study.json", &meta)?;

    let partial = out.path("convergence.partial.csv");
    let mut records = run_convergence_study(&study, Some(&partial))?;
    sort_records(&mut records);
    write_records_csv(&out.path("convergence.csv"), &records)?;

    let fits = fit_by_scheme(&records);
    let mut checks = Vec::new();
    for f in &fits {
        let label = format!("{}/{}", f.scheme, f.taming);
        let slope = f.fit.as_ref().map(|x| x.slope);
        let residual = f.fit.as_ref().map(|x| x.residual_norm);
        if let Some(lim) = exp.checks.slope_min {
            checks.push(CheckResult::at_least(format!("{label} slope"), slope, lim));
        }
        if let Some(lim) = exp.checks.slope_max {
            checks.push(CheckResult::at_most(format!("{label} slope"), slope, lim));
        }
        if let Some(lim) = exp.checks.max_residual {
            checks.push(CheckResult::at_most(format!("{label} residual"), residual, lim));
        }
    }
    let summary = json!({
        "model": config.spec().name(),
        "records": records.len(),
        "diverged": records.iter().filter(|r| r.diverged).count(),
        "fits": fits,
        "checks": checks,
    });
    out.write_json("convergence_summary.json", &summary)?;
    Ok((checks, summary))
}

fn validate(config: &RunConfig, out: &mut Out) -> Result<(Vec<CheckResult>, Value)> {
    let exp = &config.experiment;
    let mut taming = Vec::new();
    let mut passed = true;
    for (i, &kind) in exp.kinds.iter().enumerate() {
        let seed = config.seed.wrapping_add(i as u64);
        let report = verify_taming_assumptions(TamingSlot::new(kind), exp.samples, &exp.dt_grid, exp.magnitude_range, seed)?;
        // The identity map is listed for comparison only: it is unbounded by design.
        let counted = kind != TamingKind::Identity;
        if counted {
            passed &= report.passed();
        }
        taming.push(json!({ "report": report, "passed": report.passed(), "counted": counted }));
    }
    let derivatives = check_derivatives_fd(config.spec(), exp.fd_trials, config.seed, exp.fd_tol)?;
    passed &= derivatives.passed;
    let coercivity = coercivity_spot_check(config.spec(), COERCIVITY_P_BAR, &COERCIVITY_RADII, COERCIVITY_SAMPLES, config.seed)?;

    let checks = vec![CheckResult {
        name: "validation".into(),
        value: None,
        limit: 0.0,
        passed,
    }];
    let summary = json!({
        "model": config.spec().name(),
        "passed": passed,
        "taming": taming,
        "derivatives": derivatives,
        "coercivity": coercivity,
    });
    out.write_json("validation.json", &summary)?;
    Ok((checks, summary))
}

fn moments(config: &RunConfig, out: &mut Out) -> Result<(Vec<CheckResult>, Value)> {
    let p = config.experiment.p;
    let mut csv = String::from("dt,time,moment,excluded\n");
    let mut per_dt = Vec::new();
    for dt in config.dt_list("moments")? {
        let series = moment_monitor(config.spec(), &config.scheme_config(dt), config.scheme.n, config.seed, p)?;
        for ((t, m), x) in series.times.iter().zip(&series.moments).zip(&series.excluded) {
            csv.push_str(&format!("{dt},{t},{m},{x}\n"));
        }
        per_dt.push(json!({ "dt": dt, "sup": series.sup, "max_excluded": series.max_excluded }));
    }
    out.write("moments.csv", &csv)?;

    let sups: Vec<f64> = per_dt.iter().filter_map(|v| v["sup"].as_f64()).collect();
    let lo = sups.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sups.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = (sups.len() == per_dt.len() && lo > 0.0 && hi.is_finite()).then(|| hi / lo);
    let mut checks = Vec::new();
    if let Some(lim) = config.experiment.checks.max_moment_ratio {
        checks.push(CheckResult::at_most("sup_ratio", ratio, lim));
    }
    let summary = json!({
        "model": config.spec().name(),
        "p": p,
        "per_dt": per_dt,
        "sup_ratio": ratio,
        "checks": checks,
    });
    out.write_json("moments_summary.json", &summary)?;
    Ok((checks, summary))
}

fn probe(config: &RunConfig, out: &mut Out) -> Result<(Vec<CheckResult>, Value)> {
    let dt = config.single_dt("probe")?;
    let scheme = config.scheme_config(dt);
    let outcome = divergence_probe(config.spec(), &scheme, config.scheme.n, config.seed)?;
    let exp = &config.experiment;
    let near = exp.near.as_ref().map(|c| fraction_near(&outcome.final_ensemble, c, exp.radius));
    let mut checks = blown_fraction_checks(config, outcome.divergence.fraction);
    if let Some(lim) = exp.checks.min_near_fraction {
        checks.push(CheckResult::at_least("near_fraction", near, lim));
    }
    let snap = Snapshot { time: outcome.final_ensemble.t, ensemble: outcome.final_ensemble };
    write_snapshots_csv(&out.path("probe_final.csv"), std::slice::from_ref(&snap))?;
    let summary = json!({
        "model": config.spec().name(),
        "scheme": scheme,
        "taming": scheme.taming_label(),
        "N": config.scheme.n,
        "seed": config.seed,
        "divergence": outcome.divergence,
        "near_fraction": near,
        "radius": exp.radius,
        "checks": checks,
    });
    out.write_json("probe.json", &summary)?;
    Ok((checks, summary))
}

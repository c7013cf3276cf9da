//! Numerical studies built on the engine: strong-error convergence with
//! coupled reference paths, order fitting, divergence probing, moment
//! monitoring and the propagation-of-chaos rate `η_d(N)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{ChenAccumulator, NoiseGenerator, DEFAULT_K};
use crate::engine::{
    run_with_observer, DivergenceReport, Integrator, ParticleEnsemble, SchemeConfig, SchemeKind,
    DEFAULT_BLOW_UP_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::models::{LinearBenchmark, ModelSpec};
use crate::taming::TamingSpec;

pub const CONVERGENCE_HEADER: &str = "model,scheme,taming,dt,ref_dt,N,seed,mse,diverged,wallclock_s";

/// One `(scheme, dt, seed)` cell of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub model: String,
    pub scheme: SchemeKind,
    pub taming: String,
    pub dt: f64,
    pub ref_dt: f64,
    pub n: usize,
    pub seed: u64,
    /// `None` when either run diverged.
    pub mse: Option<f64>,
    pub diverged: bool,
    pub wallclock_s: Option<f64>,
}

impl ConvergenceRecord {
    fn key(&self) -> (SchemeKind, String, u64, u64) {
        (self.scheme, self.taming.clone(), self.dt.to_bits(), self.seed)
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.scheme,
            self.taming,
            self.dt,
            self.ref_dt,
            self.n,
            self.seed,
            opt(self.mse),
            self.diverged,
            opt(self.wallclock_s)
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config {
            path: "convergence csv".into(),
            message: format!("{what} in row `{line}`"),
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(bad("expected 10 columns"));
        }
        let f = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                f(s, what).map(Some)
            }
        };
        let scheme = match cols[1] {
            "classical_milstein" => SchemeKind::ClassicalMilstein,
            "taming_milstein" => SchemeKind::TamingMilstein,
            "tamed_euler" => SchemeKind::TamedEuler,
            _ => return Err(bad("unknown scheme")),
        };
        Ok(Self {
            model: cols[0].to_string(),
            scheme,
            taming: cols[2].to_string(),
            dt: f(cols[3], "bad dt")?,
            ref_dt: f(cols[4], "bad ref_dt")?,
            n: cols[5].parse().map_err(|_| bad("bad N"))?,
            seed: cols[6].parse().map_err(|_| bad("bad seed"))?,
            mse: opt(cols[7], "bad mse")?,
            diverged: cols[8].parse().map_err(|_| bad("bad diverged flag"))?,
            wallclock_s: opt(cols[9], "bad wallclock")?,
        })
    }
}

/// Canonical order: scheme, taming label, dt descending, seed.
pub fn sort_records(records: &mut [ConvergenceRecord]) {
    records.sort_by(|a, b| {
        (a.scheme, &a.taming)
            .cmp(&(b.scheme, &b.taming))
            .then(b.dt.total_cmp(&a.dt))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn write_records_csv(path: &Path, records: &[ConvergenceRecord]) -> Result<()> {
    let mut buf = String::from(CONVERGENCE_HEADER);
    buf.push('\n');
    for r in records {
        let _ = writeln!(buf, "{}", r.to_csv_row());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ConvergenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CONVERGENCE_HEADER => {}
        _ => {
            return Err(Error::Config {
                path: path.display().to_string(),
                message: "missing or unexpected header".into(),
            })
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(ConvergenceRecord::from_csv_row)
        .collect()
}

/// How the per-particle error is reduced over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseMode {
    /// Error at the horizon only.
    #[default]
    Terminal,
    /// Largest error over the coarse grid times.
    SupOverGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeVariant {
    pub kind: SchemeKind,
    pub taming: TamingSpec,
}

impl SchemeVariant {
    pub fn taming_milstein(taming: TamingSpec) -> Self {
        Self {
            kind: SchemeKind::TamingMilstein,
            taming,
        }
    }

    pub fn label(&self) -> String {
        self.config(1.0, 1.0).taming_label()
    }

    fn config(&self, dt: f64, horizon: f64) -> SchemeConfig {
        SchemeConfig::new(self.kind, self.taming, dt, horizon)
    }
}

/// Strong-error study against a fine-step reference of the same scheme.
///
/// Every coarse run is driven by the fine-grid noise aggregated exactly, so
/// the `i`-th particle of each run sees the same Brownian path. Fine and
/// coarse runs are separate particle systems.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub model: ModelSpec,
    pub schemes: Vec<SchemeVariant>,
    pub dt_list: Vec<f64>,
    pub ref_dt: f64,
    pub horizon: f64,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub include_measure_term: bool,
    pub wiktorsson_k: usize,
    pub blow_up_threshold: f64,
    pub mse_mode: MseMode,
    pub record_wallclock: bool,
}

impl ConvergenceStudy {
    pub fn new(model: ModelSpec, schemes: Vec<SchemeVariant>, dt_list: Vec<f64>, ref_dt: f64, horizon: f64, n: usize, seeds: Vec<u64>) -> Self {
        Self {
            model,
            schemes,
            dt_list,
            ref_dt,
            horizon,
            n,
            seeds,
            include_measure_term: false,
            wiktorsson_k: DEFAULT_K,
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
            mse_mode: MseMode::Terminal,
            record_wallclock: false,
        }
    }

    fn scheme_config(&self, v: &SchemeVariant, dt: f64) -> SchemeConfig {
        let mut c = v.config(dt, self.horizon);
        c.include_measure_term = self.include_measure_term;
        c.wiktorsson_k = self.wiktorsson_k;
        c.blow_up_threshold = self.blow_up_threshold;
        c
    }

    /// Coarse-to-fine step ratio for each entry of `dt_list`.
    fn ratios(&self) -> Result<Vec<usize>> {
        self.dt_list
            .iter()
            .map(|&dt| {
                let r = dt / self.ref_dt;
                if !(r >= 1.0) || (r - r.round()).abs() > 1e-9 * r {
                    return Err(Error::param(
                        "experiment.dt_list",
                        format!("ref_dt = {} does not divide dt = {dt}", self.ref_dt),
                    ));
                }
                Ok(r.round() as usize)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::param("experiment.schemes", "must not be empty"));
        }
        if self.dt_list.is_empty() {
            return Err(Error::param("experiment.dt_list", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("experiment.seeds", "must not be empty"));
        }
        self.ratios()?;
        for v in &self.schemes {
            self.scheme_config(v, self.ref_dt).validate_for(self.n)?;
            for &dt in &self.dt_list {
                self.scheme_config(v, dt).validate_for(self.n)?;
            }
        }
        Ok(())
    }
}

fn rms_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    let s: f64 = a
        .states()
        .iter()
        .zip(b.states())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (s / a.len() as f64).sqrt()
}

struct CoarseRun<'a> {
    integ: Integrator<'a>,
    sup: f64,
    seconds: f64,
}

struct SchemeRun<'a> {
    fine: Integrator<'a>,
    coarse: Vec<CoarseRun<'a>>,
}

/// Runs `study`, returning records in canonical order.
///
/// With `partial` set, each seed's records are appended to that CSV as soon
/// as they exist and cells already present there are not recomputed.
pub fn run_convergence_study(study: &ConvergenceStudy, partial: Option<&Path>) -> Result<Vec<ConvergenceRecord>> {
    study.validate()?;
    let ratios = study.ratios()?;
    let model_name = study.model.name().to_string();

    let mut records: Vec<ConvergenceRecord> = match partial {
        Some(p) if p.exists() => read_records_csv(p)?,
        _ => Vec::new(),
    };
    for r in &records {
        if r.model != model_name || r.n != study.n || r.ref_dt != study.ref_dt {
            return Err(Error::Config {
                path: partial.map(|p| p.display().to_string()).unwrap_or_default(),
                message: "partial results belong to a different study".into(),
            });
        }
    }
    if let Some(p) = partial {
        if !p.exists() {
            std::fs::write(p, format!("{CONVERGENCE_HEADER}\n")).map_err(|e| Error::io(p, e))?;
        }
    }
    let done: BTreeSet<_> = records.iter().map(ConvergenceRecord::key).collect();

    let fine_configs: Vec<SchemeConfig> = study.schemes.iter().map(|v| study.scheme_config(v, study.ref_dt)).collect();
    let coarse_configs: Vec<Vec<SchemeConfig>> = study
        .schemes
        .iter()
        .map(|v| study.dt_list.iter().map(|&dt| study.scheme_config(v, dt)).collect())
        .collect();
    let m = study.model.noise_dim();
    let fine_steps = fine_configs[0].steps();

    for &seed in &study.seeds {
        let todo: Vec<usize> = (0..study.schemes.len())
            .filter(|&s| {
                let label = fine_configs[s].taming_label();
                study.dt_list.iter().any(|dt| {
                    !done.contains(&(study.schemes[s].kind, label.clone(), dt.to_bits(), seed))
                })
            })
            .collect();
        if todo.is_empty() {
            continue;
        }
        let start = ParticleEnsemble::from_initial_law(&study.model, study.n, seed)?;
        let mut runs: Vec<SchemeRun> = todo
            .iter()
            .map(|&s| -> Result<SchemeRun> {
                Ok(SchemeRun {
                    fine: Integrator::new(&study.model.model, &fine_configs[s], start.clone())?,
                    coarse: coarse_configs[s]
                        .iter()
                        .map(|c| {
                            Ok(CoarseRun {
                                integ: Integrator::new(&study.model.model, c, start.clone())?,
                                sup: 0.0,
                                seconds: 0.0,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;

        let generator = NoiseGenerator::new(seed, study.wiktorsson_k);
        let mut accs: Vec<ChenAccumulator> = ratios.iter().map(|&r| ChenAccumulator::new(r)).collect();
        for step in 0..fine_steps {
            let block = generator.sample_step(step as u64, study.n, m, study.ref_dt, study.include_measure_term);
            let coarse_blocks: Vec<_> = accs.iter_mut().map(|a| a.push(&block)).collect::<Result<_>>()?;
            let timed = study.record_wallclock;
            let sup_mode = study.mse_mode == MseMode::SupOverGrid;
            runs.par_iter_mut().try_for_each(|run| -> Result<()> {
                run.fine.advance(&block)?;
                for (c, cb) in run.coarse.iter_mut().zip(&coarse_blocks) {
                    if let Some(cb) = cb {
                        let t0 = timed.then(Instant::now);
                        c.integ.advance(cb)?;
                        if let Some(t0) = t0 {
                            c.seconds += t0.elapsed().as_secs_f64();
                        }
                        if sup_mode {
                            c.sup = c.sup.max(rms_distance(run.fine.ensemble(), c.integ.ensemble()));
                        }
                    }
                }
                Ok(())
            })?;
        }

        let mut fresh = Vec::new();
        for (run, &s) in runs.iter().zip(&todo) {
            let fine = run.fine.ensemble();
            for (c, &dt) in run.coarse.iter().zip(&study.dt_list) {
                let label = fine_configs[s].taming_label();
                if done.contains(&(study.schemes[s].kind, label.clone(), dt.to_bits(), seed)) {
                    continue;
                }
                let coarse = c.integ.ensemble();
                let diverged = fine.blown_count() > 0 || coarse.blown_count() > 0;
                let mse = match study.mse_mode {
                    MseMode::Terminal => rms_distance(fine, coarse),
                    MseMode::SupOverGrid => c.sup,
                };
                fresh.push(ConvergenceRecord {
                    model: model_name.clone(),
                    scheme: study.schemes[s].kind,
                    taming: label,
                    dt,
                    ref_dt: study.ref_dt,
                    n: study.n,
                    seed,
                    mse: (!diverged).then_some(mse),
                    diverged,
                    wallclock_s: study.record_wallclock.then_some(c.seconds),
                });
            }
        }
        if let Some(p) = partial {
            let mut f = std::fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            let mut chunk = String::new();
            for r in &fresh {
                let _ = writeln!(chunk, "{}", r.to_csv_row());
            }
            f.write_all(chunk.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(p, e))?;
        }
        records.extend(fresh);
    }
    sort_records(&mut records);
    Ok(records)
}

/// Least-squares line through `(log₂ dt, log₂ MSE)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the residuals in log₂ units.
    pub residual_norm: f64,
    /// `(dt, MSE)` points used; several seeds at one `dt` are combined as
    /// the root mean square of their MSEs.
    pub points: Vec<(f64, f64)>,
    /// Records skipped because they diverged or had no usable MSE.
    pub excluded: usize,
}

pub fn fit_order(records: &[ConvergenceRecord]) -> Result<OrderFit> {
    let mut excluded = 0;
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for r in records {
        match r.mse {
            Some(e) if !r.diverged && e.is_finite() && e > 0.0 && r.dt > 0.0 => {
                match groups.iter_mut().find(|g| g.0 == r.dt) {
                    Some(g) => {
                        g.1 += e * e;
                        g.2 += 1;
                    }
                    None => groups.push((r.dt, e * e, 1)),
                }
            }
            _ => excluded += 1,
        }
    }
    groups.sort_by(|a, b| b.0.total_cmp(&a.0));
    if groups.len() < 2 {
        return Err(Error::InsufficientRecords { finite: groups.len() });
    }
    let points: Vec<(f64, f64)> = groups.iter().map(|&(dt, s, c)| (dt, (s / c as f64).sqrt())).collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual_norm = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(OrderFit {
        slope,
        intercept,
        residual_norm,
        points,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeFit {
    pub scheme: SchemeKind,
    pub taming: String,
    pub fit: Option<OrderFit>,
    pub error: Option<String>,
}

/// One fit per `(scheme, taming)` pair, in canonical order.
pub fn fit_by_scheme(records: &[ConvergenceRecord]) -> Vec<SchemeFit> {
    let keys: BTreeSet<(SchemeKind, String)> = records.iter().map(|r| (r.scheme, r.taming.clone())).collect();
    keys.into_iter()
        .map(|(scheme, taming)| {
            let sel: Vec<_> = records.iter().filter(|r| r.scheme == scheme && r.taming == taming).cloned().collect();
            match fit_order(&sel) {
                Ok(f) => SchemeFit { scheme, taming, fit: Some(f), error: None },
                Err(e) => SchemeFit { scheme, taming, fit: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Root-mean-square strong error of the classical scheme on the linear
/// model against its closed-form solution at the horizon, one entry per
/// `dt`. Each path is a particle of a non-interacting system.
pub fn linear_strong_errors(
    params: LinearBenchmark,
    x0: f64,
    dt_list: &[f64],
    horizon: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    use crate::models::Model;
    let model = Model::LinearBenchmark(params);
    dt_list
        .iter()
        .map(|&dt| {
            let cfg = SchemeConfig::classical(dt, horizon);
            cfg.validate_for(paths)?;
            let mut integ = Integrator::new(&model, &cfg, ParticleEnsemble::new(vec![x0; paths], 1)?)?;
            let generator = NoiseGenerator::new(seed, 1);
            let mut w = vec![0.0; paths];
            for k in 0..cfg.steps() {
                let noise = generator.sample_step(k as u64, paths, 1, dt, false);
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi += noise.dw(i, 0);
                }
                integ.advance(&noise)?;
            }
            let ens = integ.ensemble();
            let s: f64 = w
                .iter()
                .enumerate()
                .map(|(i, &wt)| (params.exact(x0, horizon, wt) - ens.state(i)[0]).powi(2))
                .sum();
            Ok((dt, (s / paths as f64).sqrt()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub divergence: DivergenceReport,
    pub final_ensemble: ParticleEnsemble,
}

/// Runs the simulation and summarises which particles blew up and when.
pub fn divergence_probe(spec: &ModelSpec, config: &SchemeConfig, n: usize, seed: u64) -> Result<ProbeOutcome> {
    let traj = run_with_observer(spec, config, n, seed, &[], |_| {})?;
    Ok(ProbeOutcome {
        divergence: traj.divergence,
        final_ensemble: traj.final_ensemble,
    })
}

/// Fraction of particles (blown ones count as outside) lying within
/// `radius` of at least one of `centers`.
pub fn fraction_near(ens: &ParticleEnsemble, centers: &[Vec<f64>], radius: f64) -> f64 {
    let hits = (0..ens.len())
        .filter(|&i| ens.blown_up()[i].is_none())
        .filter(|&i| {
            let y = ens.state(i);
            centers.iter().any(|c| {
                c.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= radius
            })
        })
        .count();
    hits as f64 / ens.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSeries {
    pub dt: f64,
    pub p: f64,
    pub times: Vec<f64>,
    /// `(1/N') Σ |Yⁱ|ᵖ` over the `N'` particles that have not blown up.
    pub moments: Vec<f64>,
    /// Blown-up particles left out at each time.
    pub excluded: Vec<usize>,
    pub sup: f64,
    pub max_excluded: usize,
}

pub fn moment_monitor(spec: &ModelSpec, config: &SchemeConfig, n: usize, seed: u64, p: f64) -> Result<MomentSeries> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::param("experiment.p", "must be >= 2"));
    }
    let mut times = Vec::with_capacity(config.steps() + 1);
    let mut moments = Vec::with_capacity(config.steps() + 1);
    let mut excluded = Vec::with_capacity(config.steps() + 1);
    run_with_observer(spec, config, n, seed, &[], |ens| {
        let (mut s, mut c) = (0.0, 0usize);
        for i in 0..ens.len() {
            if ens.blown_up()[i].is_none() {
                s += ens.state(i).iter().map(|x| x * x).sum::<f64>().powf(p / 2.0);
                c += 1;
            }
        }
        times.push(ens.t);
        moments.push(if c > 0 { s / c as f64 } else { f64::NAN });
        excluded.push(ens.len() - c);
    })?;
    let sup = moments.iter().copied().filter(|x| x.is_finite()).fold(0.0, f64::max);
    let max_excluded = excluded.iter().copied().max().unwrap_or(0);
    Ok(MomentSeries {
        dt: config.dt,
        p,
        times,
        moments,
        excluded,
        sup,
        max_excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaTable {
    pub d: usize,
    pub n: usize,
    pub eta: f64,
}

/// Propagation-of-chaos rate: `N^{-1/2}` for `d < 4`, `N^{-1/2} ln N` for
/// `d = 4` and `N^{-2/d}` for `d > 4`.
pub fn eta_d(d: usize, n: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::param("d", "must be at least 1"));
    }
    if n < 2 {
        return Err(Error::param("N", "must be at least 2"));
    }
    let nf = n as f64;
    Ok(match d {
        1..=3 => nf.powf(-0.5),
        4 => nf.powf(-0.5) * nf.ln(),
        _ => nf.powf(-2.0 / d as f64),
    })
}

pub fn eta_table(d: usize, ns: &[usize]) -> Result<Vec<EtaTable>> {
    ns.iter().map(|&n| Ok(EtaTable { d, n, eta: eta_d(d, n)? })).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub eta: f64,
    pub mean: Vec<f64>,
    pub second_moment: f64,
    pub blown_up: usize,
}

/// Terminal ensemble statistics for increasing `N`, for a qualitative look
/// at how the particle approximation settles.
pub fn n_sweep(spec: &ModelSpec, config: &SchemeConfig, ns: &[usize], seed: u64) -> Result<Vec<SweepRow>> {
    ns.iter()
        .map(|&n| {
            let out = divergence_probe(spec, config, n, seed)?;
            let ens = &out.final_ensemble;
            let mv = crate::engine::interaction_functionals(ens)?;
            Ok(SweepRow {
                n,
                eta: eta_d(spec.dim(), n.max(2))?,
                mean: mv.mean().to_vec(),
                second_moment: mv.mean_sq_norm(),
                blown_up: ens.blown_count(),
            })
        })
        .collect()
}

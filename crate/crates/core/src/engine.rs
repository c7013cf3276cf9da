//! Particle stepping for Milstein-type schemes.
//!
//! One step of particle `i` reads
//!
//! ```text
//! Y⁺ = Y + Γ₁(f) h + Σ_j Γ₂(g_j) ΔW_j
//!        + Σ_{j1,j2} Γ₃(∂_y g_{j1} g_{j2}) I^{i}[j2][j1]
//!        + (1/N) Σ_{j1,j2,k} Γ₄(∂_ρ g_{j1}(Y, ρ, Yᵏ) g_{j2}(Yᵏ)) I^{(k,j2),(i,j1)}
//! ```
//!
//! where every coefficient sees the empirical measure `ρ` frozen at the
//! start of the step. The classical scheme uses the identity in all slots;
//! tamed Euler keeps only the first line.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{NoiseBlock, NoiseGenerator, DEFAULT_K};
use crate::error::{Error, Result};
use crate::measure::MeasureView;
use crate::models::{Coefficients, ModelSpec};
use crate::rng::{self, Purpose};
use crate::taming::TamingSpec;

pub const DEFAULT_BLOW_UP_THRESHOLD: f64 = 1e10;
pub const DEFAULT_CROSS_N_CEILING: usize = 64;

/// Relative tolerance on `T / dt` being an integer.
const GRID_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ClassicalMilstein,
    TamingMilstein,
    TamedEuler,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::ClassicalMilstein => "classical_milstein",
            SchemeKind::TamingMilstein => "taming_milstein",
            SchemeKind::TamedEuler => "tamed_euler",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    /// Ignored by the classical scheme.
    pub taming: TamingSpec,
    pub include_measure_term: bool,
    pub dt: f64,
    pub horizon: f64,
    pub blow_up_threshold: f64,
    pub cross_n_ceiling: usize,
    pub wiktorsson_k: usize,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, taming: TamingSpec, dt: f64, horizon: f64) -> Self {
        Self {
            kind,
            taming,
            include_measure_term: false,
            dt,
            horizon,
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
            cross_n_ceiling: DEFAULT_CROSS_N_CEILING,
            wiktorsson_k: DEFAULT_K,
        }
    }

    pub fn classical(dt: f64, horizon: f64) -> Self {
        Self::new(SchemeKind::ClassicalMilstein, TamingSpec::identity(), dt, horizon)
    }

    pub fn taming(taming: TamingSpec, dt: f64, horizon: f64) -> Self {
        Self::new(SchemeKind::TamingMilstein, taming, dt, horizon)
    }

    /// The slots actually applied by the stepper.
    pub fn effective_taming(&self) -> TamingSpec {
        match self.kind {
            SchemeKind::ClassicalMilstein => TamingSpec::identity(),
            _ => self.taming,
        }
    }

    /// `TanhM`, `Identity`, ... for the slots in effect.
    pub fn taming_label(&self) -> String {
        self.effective_taming().label()
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Grid time of step `k`.
    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::param("scheme.dt", "must be positive and finite"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::param("scheme.T", "must be positive and finite"));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > GRID_TOL * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::param(
                "scheme.dt",
                format!("dt = {} does not divide T = {}", self.dt, self.horizon),
            ));
        }
        if !(self.blow_up_threshold > 0.0) {
            return Err(Error::param("scheme.blow_up_threshold", "must be positive"));
        }
        if self.cross_n_ceiling == 0 {
            return Err(Error::param("scheme.cross_n_ceiling", "must be positive"));
        }
        if self.wiktorsson_k == 0 {
            return Err(Error::param("scheme.K", "must be at least 1"));
        }
        if self.kind != SchemeKind::ClassicalMilstein {
            self.taming.validate()?;
            if self.taming.has_identity_slot() {
                return Err(Error::param(
                    "scheme.taming",
                    format!(
                        "identity slots are unbounded and only allowed for classical_milstein ({} requested)",
                        self.kind
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Validation that also depends on the ensemble size.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n == 0 {
            return Err(Error::param("N", "must be positive"));
        }
        if self.include_measure_term && n > self.cross_n_ceiling {
            return Err(Error::param(
                "scheme.include_measure_term",
                format!(
                    "needs N <= cross_n_ceiling = {}, got N = {n}",
                    self.cross_n_ceiling
                ),
            ));
        }
        Ok(())
    }
}

/// N particle states at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub t: f64,
    d: usize,
    /// Row-major N×d.
    states: Vec<f64>,
    /// First blow-up time per particle.
    blown_up: Vec<Option<f64>>,
}

impl ParticleEnsemble {
    pub fn new(states: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || states.is_empty() || states.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                context: "ensemble states",
                expected: d,
                actual: states.len(),
            });
        }
        if let Some((index, &value)) = states.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        let n = states.len() / d;
        Ok(Self {
            t: 0.0,
            d,
            states,
            blown_up: vec![None; n],
        })
    }

    /// `n` i.i.d. draws from the model's initial law; particle `i` uses its
    /// own stream, so the draw does not depend on `n` or on scheduling.
    pub fn from_initial_law(spec: &ModelSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("N", "must be positive"));
        }
        let d = spec.dim();
        let mut states = vec![0.0; n * d];
        states.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
            let mut r = rng::stream(seed, Purpose::InitialState, 0, i as u64);
            spec.initial_law.sample(&mut r, row);
        });
        Self::new(states, d)
    }

    pub fn len(&self) -> usize {
        self.blown_up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blown_up.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.d..(i + 1) * self.d]
    }

    pub fn blown_up(&self) -> &[Option<f64>] {
        &self.blown_up
    }

    pub fn blown_count(&self) -> usize {
        self.blown_up.iter().filter(|b| b.is_some()).count()
    }

    /// Reorders particles: particle `i` of the result is particle `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut states = Vec::with_capacity(self.states.len());
        let mut blown = Vec::with_capacity(self.len());
        for &p in perm {
            states.extend_from_slice(self.state(p));
            blown.push(self.blown_up[p]);
        }
        Self {
            t: self.t,
            d: self.d,
            states,
            blown_up: blown,
        }
    }
}

/// Snapshot of the empirical measure used by every particle during one step:
/// means, mean-square norm, `W₂(ρ, δ₀)` and per-query kernel averages.
pub fn interaction_functionals(ensemble: &ParticleEnsemble) -> Result<MeasureView> {
    MeasureView::new(&ensemble.states, ensemble.d)
}

/// Per-thread scratch buffers.
struct Scratch {
    f: Vec<f64>,
    g: Vec<f64>,
    jac: Vec<f64>,
    tmp: Vec<f64>,
    lions: Vec<f64>,
    acc: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize) -> Self {
        Self {
            f: vec![0.0; d],
            g: vec![0.0; m * d],
            jac: vec![0.0; m * d * d],
            tmp: vec![0.0; d],
            lions: vec![0.0; d * d],
            acc: vec![0.0; d],
        }
    }
}

fn mat_vec_into(a: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = a[r * d..(r + 1) * d].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn check_noise(ens: &ParticleEnsemble, noise: &NoiseBlock, model: &dyn Coefficients, cfg: &SchemeConfig) -> Result<()> {
    if model.dim() != ens.d {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs model dimension",
            expected: model.dim(),
            actual: ens.d,
        });
    }
    if noise.particles() != ens.len() || noise.brownian_dim() != model.noise_dim() {
        return Err(Error::ShapeMismatch(format!(
            "noise is N={} m={}, system is N={} m={}",
            noise.particles(),
            noise.brownian_dim(),
            ens.len(),
            model.noise_dim()
        )));
    }
    if (noise.h() - cfg.dt).abs() > GRID_TOL * cfg.dt.max(1.0) * 16.0 {
        return Err(Error::ShapeMismatch(format!(
            "noise step {} differs from dt {}",
            noise.h(),
            cfg.dt
        )));
    }
    match (cfg.include_measure_term, noise.has_cross()) {
        (true, false) => Err(Error::ShapeMismatch(
            "measure term requested but the noise block has no cross-particle integrals".into(),
        )),
        (false, true) => Err(Error::ShapeMismatch(
            "cross-particle integrals supplied but the measure term is disabled".into(),
        )),
        _ => Ok(()),
    }
}

/// Advances every particle by one step. The measure snapshot is built from
/// the input ensemble before any particle moves.
pub fn step_particles(
    ensemble: &ParticleEnsemble,
    noise: &NoiseBlock,
    model: &dyn Coefficients,
    config: &SchemeConfig,
) -> Result<ParticleEnsemble> {
    let mut next = ensemble.clone();
    step_in_place(&mut next, noise, model, config)?;
    Ok(next)
}

pub(crate) fn step_in_place(
    ens: &mut ParticleEnsemble,
    noise: &NoiseBlock,
    model: &dyn Coefficients,
    cfg: &SchemeConfig,
) -> Result<()> {
    check_noise(ens, noise, model, cfg)?;
    let d = ens.d;
    let m = model.noise_dim();
    let n = ens.len();
    let h = cfg.dt;
    let taming = cfg.effective_taming();
    let milstein = cfg.kind != SchemeKind::TamedEuler;
    let measure_term = milstein && cfg.include_measure_term;
    let t_next = ens.t + h;

    // phase 1: frozen snapshot
    let prev = ens.states.clone();
    let mv = MeasureView::new(&prev, d)?;
    let gz: Vec<f64> = if measure_term {
        let mut gz = vec![0.0; n * m * d];
        gz.par_chunks_mut(m * d).enumerate().for_each(|(k, out)| {
            let z = &prev[k * d..(k + 1) * d];
            for j in 0..m {
                model.diffusion(j, z, &mv, &mut out[j * d..(j + 1) * d]);
            }
        });
        gz
    } else {
        Vec::new()
    };

    // phase 2: independent per-particle updates
    let threshold = cfg.blow_up_threshold;
    ens.states
        .par_chunks_mut(d)
        .zip(ens.blown_up.par_iter_mut())
        .enumerate()
        .for_each_init(
            || Scratch::new(d, m),
            |w, (i, (out, blown))| {
                if blown.is_some() {
                    return;
                }
                let y = &prev[i * d..(i + 1) * d];
                out.copy_from_slice(y);

                model.drift(y, &mv, &mut w.f);
                taming.drift().apply_in_place(&mut w.f, h);
                for (o, f) in out.iter_mut().zip(&w.f) {
                    *o += f * h;
                }

                for j in 0..m {
                    let (g, jac) = (
                        &mut w.g[j * d..(j + 1) * d],
                        &mut w.jac[j * d * d..(j + 1) * d * d],
                    );
                    if milstein {
                        model.diffusion_with_jacobian(j, y, &mv, g, jac);
                    } else {
                        model.diffusion(j, y, &mv, g);
                    }
                }
                for j in 0..m {
                    w.tmp.copy_from_slice(&w.g[j * d..(j + 1) * d]);
                    taming.diffusion().apply_in_place(&mut w.tmp, h);
                    let dw = noise.dw(i, j);
                    for (o, x) in out.iter_mut().zip(&w.tmp) {
                        *o += x * dw;
                    }
                }

                if milstein {
                    for j1 in 0..m {
                        let jac = &w.jac[j1 * d * d..(j1 + 1) * d * d];
                        for j2 in 0..m {
                            mat_vec_into(jac, &w.g[j2 * d..(j2 + 1) * d], &mut w.tmp);
                            taming.state_correction().apply_in_place(&mut w.tmp, h);
                            let iint = noise.own(i, j2, j1);
                            for (o, x) in out.iter_mut().zip(&w.tmp) {
                                *o += x * iint;
                            }
                        }
                    }
                }

                if measure_term {
                    w.acc.fill(0.0);
                    let kind = taming.measure_correction();
                    for k in 0..n {
                        let z = &prev[k * d..(k + 1) * d];
                        for j1 in 0..m {
                            model.lions_derivative(j1, y, &mv, z, &mut w.lions);
                            for j2 in 0..m {
                                let gk = &gz[(k * m + j2) * d..(k * m + j2 + 1) * d];
                                mat_vec_into(&w.lions, gk, &mut w.tmp);
                                kind.apply_in_place(&mut w.tmp, h);
                                let c = noise.cross(k * m + j2, i * m + j1).unwrap_or(0.0);
                                for (a, x) in w.acc.iter_mut().zip(&w.tmp) {
                                    *a += x * c;
                                }
                            }
                        }
                    }
                    for (o, a) in out.iter_mut().zip(&w.acc) {
                        *o += a / n as f64;
                    }
                }

                let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm <= threshold) {
                    freeze_at_sentinel(out, y, norm, threshold);
                    *blown = Some(t_next);
                }
            },
        );
    ens.t = t_next;
    Ok(())
}

/// Moves a diverging particle onto the sphere of radius `threshold`, keeping
/// its direction when that is still defined.
fn freeze_at_sentinel(out: &mut [f64], prev: &[f64], norm: f64, threshold: f64) {
    if norm.is_finite() && norm > 0.0 {
        let s = threshold / norm;
        out.iter_mut().for_each(|x| *x *= s);
        return;
    }
    let pn = prev.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pn.is_finite() && pn > 0.0 {
        for (o, p) in out.iter_mut().zip(prev) {
            *o = p * (threshold / pn);
        }
    } else {
        out.fill(0.0);
        out[0] = threshold;
    }
}

/// A stepper bound to one model and scheme.
pub struct Integrator<'a> {
    model: &'a dyn Coefficients,
    config: &'a SchemeConfig,
    ensemble: ParticleEnsemble,
    step: usize,
}

impl<'a> Integrator<'a> {
    pub fn new(model: &'a dyn Coefficients, config: &'a SchemeConfig, ensemble: ParticleEnsemble) -> Result<Self> {
        config.validate_for(ensemble.len())?;
        if ensemble.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "ensemble vs model dimension",
                expected: model.dim(),
                actual: ensemble.dim(),
            });
        }
        Ok(Self {
            model,
            config,
            ensemble,
            step: 0,
        })
    }

    pub fn advance(&mut self, noise: &NoiseBlock) -> Result<()> {
        step_in_place(&mut self.ensemble, noise, self.model, self.config)?;
        self.step += 1;
        // keep t on the grid instead of accumulating rounding
        self.ensemble.t = self.config.time_of(self.step);
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn into_ensemble(self) -> ParticleEnsemble {
        self.ensemble
    }
}

/// States at one output time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub ensemble: ParticleEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub particles: usize,
    pub blown_up: usize,
    pub fraction: f64,
    /// Sorted first blow-up times.
    pub first_blow_up_times: Vec<f64>,
    /// Set when every particle diverged before the horizon.
    pub terminated_early_at: Option<f64>,
}

impl DivergenceReport {
    pub fn from_ensemble(ens: &ParticleEnsemble, terminated_early_at: Option<f64>) -> Self {
        let mut times: Vec<f64> = ens.blown_up().iter().flatten().copied().collect();
        times.sort_by(f64::total_cmp);
        Self {
            particles: ens.len(),
            blown_up: times.len(),
            fraction: times.len() as f64 / ens.len() as f64,
            first_blow_up_times: times,
            terminated_early_at,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blown_up == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_ensemble: ParticleEnsemble,
    pub divergence: DivergenceReport,
}

/// Maps output times onto step indices of the grid.
pub fn snapshot_steps(config: &SchemeConfig, times: &[f64]) -> Result<Vec<usize>> {
    let total = config.steps();
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let k = t / config.dt;
        let kr = k.round();
        if !(t >= 0.0) || (k - kr).abs() > 1e-9 * kr.max(1.0) || kr as usize > total {
            return Err(Error::param(
                "io.snapshot_times",
                format!("{t} is not a grid time in [0, {}]", config.horizon),
            ));
        }
        steps.push(kr as usize);
    }
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// Runs `model` from i.i.d. initial states to the horizon. `observe` sees
/// the ensemble after every step (and once at `t = 0`).
pub fn run_with_observer(
    spec: &ModelSpec,
    config: &SchemeConfig,
    n: usize,
    seed: u64,
    snapshot_times: &[f64],
    mut observe: impl FnMut(&ParticleEnsemble),
) -> Result<Trajectory> {
    config.validate_for(n)?;
    let wanted = snapshot_steps(config, snapshot_times)?;
    let ensemble = ParticleEnsemble::from_initial_law(spec, n, seed)?;
    let mut integ = Integrator::new(&spec.model, config, ensemble)?;
    let generator = NoiseGenerator::new(seed, config.wiktorsson_k);
    let (m, h) = (spec.noise_dim(), config.dt);

    let mut snapshots = Vec::with_capacity(wanted.len());
    let mut next_wanted = wanted.iter().peekable();
    let mut take = |k: usize, ens: &ParticleEnsemble, snaps: &mut Vec<Snapshot>| {
        while next_wanted.peek().is_some_and(|&&w| w == k) {
            next_wanted.next();
            snaps.push(Snapshot {
                time: ens.t,
                ensemble: ens.clone(),
            });
        }
    };
    observe(integ.ensemble());
    take(0, integ.ensemble(), &mut snapshots);
    let mut terminated = None;
    for k in 0..config.steps() {
        let noise = generator.sample_step(k as u64, n, m, h, config.include_measure_term);
        integ.advance(&noise)?;
        observe(integ.ensemble());
        take(k + 1, integ.ensemble(), &mut snapshots);
        if integ.ensemble().blown_count() == n {
            terminated = Some(integ.ensemble().t);
            break;
        }
    }
    let final_ensemble = integ.into_ensemble();
    Ok(Trajectory {
        divergence: DivergenceReport::from_ensemble(&final_ensemble, terminated),
        snapshots,
        final_ensemble,
    })
}

/// [`run_with_observer`] without an observer, snapshotting at `0` and `T`
/// when `snapshot_times` is empty.
pub fn run_simulation(
    spec: &ModelSpec,
    config: &SchemeConfig,
    n: usize,
    seed: u64,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    let default = [0.0, config.horizon];
    let times = if snapshot_times.is_empty() { &default[..] } else { snapshot_times };
    run_with_observer(spec, config, n, seed, times, |_| {})
}

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

/// Writes `time,particle,coord_0..coord_{d-1},blown_up` rows for every
/// snapshot. `blown_up` is `1` for frozen particles and `0` otherwise.
pub fn write_snapshots_csv(path: &Path, snapshots: &[Snapshot]) -> Result<()> {
    use std::fmt::Write as _;
    let d = snapshots.first().map_or(0, |s| s.ensemble.dim());
    let mut buf = String::from("time,particle");
    for c in 0..d {
        let _ = write!(buf, ",coord_{c}");
    }
    buf.push_str(",blown_up\n");
    for snap in snapshots {
        for i in 0..snap.ensemble.len() {
            let _ = write!(buf, "{},{}", snap.time, i);
            for x in snap.ensemble.state(i) {
                let _ = write!(buf, ",{x}");
            }
            let flag = u8::from(snap.ensemble.blown_up()[i].is_some());
            let _ = writeln!(buf, ",{flag}");
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DoubleWell, InitialLaw, LinearBenchmark, Model};
    use crate::taming::TamingKind;

    /// f ≡ 0, g ≡ 0 in any dimension.
    struct Zero {
        d: usize,
        m: usize,
    }

    impl Coefficients for Zero {
        fn dim(&self) -> usize {
            self.d
        }
        fn noise_dim(&self) -> usize {
            self.m
        }
        fn drift(&self, _: &[f64], _: &MeasureView, out: &mut [f64]) {
            out.fill(0.0)
        }
        fn diffusion(&self, _: usize, _: &[f64], _: &MeasureView, out: &mut [f64]) {
            out.fill(0.0)
        }
        fn diffusion_jacobian(&self, _: usize, _: &[f64], _: &MeasureView, out: &mut [f64]) {
            out.fill(0.0)
        }
        fn lions_derivative(&self, _: usize, _: &[f64], _: &MeasureView, _: &[f64], out: &mut [f64]) {
            out.fill(0.0)
        }
        fn measure_dependent_diffusion(&self) -> bool {
            false
        }
    }

    fn all_schemes(dt: f64) -> Vec<SchemeConfig> {
        let mut v = vec![SchemeConfig::classical(dt, 1.0)];
        for t in TamingSpec::families() {
            v.push(SchemeConfig::taming(t, dt, 1.0));
            v.push(SchemeConfig::new(SchemeKind::TamedEuler, t, dt, 1.0));
        }
        v
    }

    #[test]
    fn zero_model_leaves_states_unchanged() {
        let model = Zero { d: 2, m: 3 };
        let ens = ParticleEnsemble::new(vec![1.0, -2.0, 0.5, 3.0, 1e3, 7.0], 2).unwrap();
        for mut cfg in all_schemes(0.125) {
            for cross in [false, true] {
                cfg.include_measure_term = cross;
                let noise = NoiseGenerator::new(1, 20).sample_step(0, 3, 3, 0.125, cross);
                let next = step_particles(&ens, &noise, &model, &cfg).unwrap();
                assert_eq!(next.states(), ens.states());
                assert_eq!(next.t, 0.125);
            }
        }
    }

    #[test]
    fn linear_one_step_matches_hand_expansion() {
        let lb = LinearBenchmark { a: 1.3, b: 0.7 };
        let dt = 2f64.powi(-5);
        let y = 0.9;
        let dw = -0.21;
        let ens = ParticleEnsemble::new(vec![y], 1).unwrap();
        let noise = NoiseBlock::from_parts(dt, 1, 1, vec![dw], None).unwrap();
        let cfg = SchemeConfig::classical(dt, 1.0);
        let next = step_particles(&ens, &noise, &Model::LinearBenchmark(lb), &cfg).unwrap();
        let want = y * (1.0 + lb.a * dt + lb.b * dw + 0.5 * lb.b * lb.b * (dw * dw - dt));
        assert!((next.state(0)[0] - want).abs() <= 1e-15 * want.abs());
    }

    #[test]
    fn milstein_minus_euler_is_the_correction() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case1()), DoubleWell::case1_initial_law()).unwrap();
        let ens = ParticleEnsemble::from_initial_law(&spec, 7, 5).unwrap();
        let dt = 2f64.powi(-6);
        let noise = NoiseGenerator::new(5, 20).sample_step(0, 7, 1, dt, false);
        for t in TamingSpec::families() {
            let mil = SchemeConfig::taming(t, dt, 1.0);
            let eul = SchemeConfig::new(SchemeKind::TamedEuler, t, dt, 1.0);
            let a = step_particles(&ens, &noise, &spec.model, &mil).unwrap();
            let b = step_particles(&ens, &noise, &spec.model, &eul).unwrap();
            let mv = interaction_functionals(&ens).unwrap();
            for i in 0..7 {
                let y = ens.state(i);
                let l = spec.l_y_eval(1, 1, y, &mv).unwrap();
                let corr = t.state_correction().apply_scalar(l[0], dt) * noise.own(i, 0, 0);
                let diff = a.state(i)[0] - b.state(i)[0];
                assert!((diff - corr).abs() <= 1e-12 * (1.0 + a.state(i)[0].abs()), "{diff} vs {corr}");
            }
        }
    }

    #[test]
    fn permuting_particles_and_noise_permutes_output() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case2()), DoubleWell::case1_initial_law()).unwrap();
        let ens = ParticleEnsemble::from_initial_law(&spec, 9, 3).unwrap();
        let noise = NoiseGenerator::new(3, 20).sample_step(0, 9, 1, 0.01, false);
        let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
        let cfg = SchemeConfig::taming(TamingSpec::mixed(), 0.01, 1.0);
        let a = step_particles(&ens, &noise, &spec.model, &cfg).unwrap();
        let b = step_particles(&ens.permuted(&perm), &noise.permuted(&perm).unwrap(), &spec.model, &cfg).unwrap();
        assert_eq!(a.permuted(&perm), b);
    }

    #[test]
    fn measure_free_system_equals_independent_runs() {
        let spec = ModelSpec::new(
            Model::LinearBenchmark(LinearBenchmark::default()),
            InitialLaw::IndependentNormal {
                mean: vec![1.0],
                std_dev: vec![0.3],
            },
        )
        .unwrap();
        let n = 6;
        let cfg = SchemeConfig::taming(TamingSpec::tanh(), 0.05, 0.5);
        let gen = NoiseGenerator::new(2, 20);
        let mut joint = ParticleEnsemble::from_initial_law(&spec, n, 2).unwrap();
        let mut single: Vec<ParticleEnsemble> = (0..n)
            .map(|i| ParticleEnsemble::new(joint.state(i).to_vec(), 1).unwrap())
            .collect();
        for k in 0..cfg.steps() {
            let noise = gen.sample_step(k as u64, n, 1, cfg.dt, false);
            joint = step_particles(&joint, &noise, &spec.model, &cfg).unwrap();
            for (i, s) in single.iter_mut().enumerate() {
                let own = NoiseBlock::from_parts(cfg.dt, 1, 1, noise.particle_dw(i).to_vec(), None).unwrap();
                *s = step_particles(s, &own, &spec.model, &cfg).unwrap();
            }
        }
        for (i, s) in single.iter().enumerate() {
            assert_eq!(joint.state(i), s.states());
        }
    }

    /// Records the measure each evaluation sees.
    struct Spy {
        inner: Model,
        seen: std::sync::Mutex<Vec<Vec<f64>>>,
    }

    impl Coefficients for Spy {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn noise_dim(&self) -> usize {
            self.inner.noise_dim()
        }
        fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
            self.seen.lock().unwrap().push(mv.points().flatten().copied().collect());
            self.inner.drift(y, mv, out)
        }
        fn diffusion(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
            self.seen.lock().unwrap().push(mv.points().flatten().copied().collect());
            self.inner.diffusion(j, y, mv, out)
        }
        fn diffusion_jacobian(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
            self.inner.diffusion_jacobian(j, y, mv, out)
        }
        fn lions_derivative(&self, j: usize, y: &[f64], mv: &MeasureView, z: &[f64], out: &mut [f64]) {
            self.inner.lions_derivative(j, y, mv, z, out)
        }
        fn measure_dependent_diffusion(&self) -> bool {
            true
        }
    }

    #[test]
    fn every_update_reads_the_start_of_step_measure() {
        let spy = Spy {
            inner: Model::DoubleWell(DoubleWell::case1()),
            seen: Default::default(),
        };
        let ens = ParticleEnsemble::new(vec![0.3, -0.8, 1.4, 0.05, -1.1], 1).unwrap();
        let frozen: Vec<f64> = interaction_functionals(&ens).unwrap().points().flatten().copied().collect();
        let mut cfg = SchemeConfig::taming(TamingSpec::tanh(), 2f64.powi(-6), 1.0);
        cfg.include_measure_term = true;
        let noise = NoiseGenerator::new(1, 20).sample_step(0, 5, 1, cfg.dt, true);
        let next = step_particles(&ens, &noise, &spy, &cfg).unwrap();
        assert_ne!(next.states(), ens.states());
        let seen = spy.seen.into_inner().unwrap();
        assert!(seen.len() >= 10);
        assert!(seen.iter().all(|s| *s == frozen));
    }

    #[test]
    fn tamed_increments_are_bounded() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case1()), InitialLaw::PointMass { at: vec![0.0] }).unwrap();
        let states: Vec<f64> = (0..40).map(|i| (i as f64 - 20.0) * 37.0).collect();
        let ens = ParticleEnsemble::new(states, 1).unwrap();
        for dt in [2f64.powi(-4), 2f64.powi(-8)] {
            let noise = NoiseGenerator::new(9, 20).sample_step(0, 40, 1, dt, false);
            for t in TamingSpec::families() {
                let cfg = SchemeConfig::taming(t, dt, 1.0);
                let next = step_particles(&ens, &noise, &spec.model, &cfg).unwrap();
                for i in 0..40 {
                    let inc = (next.state(i)[0] - ens.state(i)[0]).abs();
                    let bound = 1.0 + (noise.dw(i, 0).abs() + noise.own(i, 0, 0).abs()) / dt;
                    assert!(inc <= bound * (1.0 + 1e-12), "{inc} > {bound}");
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_noise() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case2()), InitialLaw::PointMass { at: vec![0.0] }).unwrap();
        let ens = ParticleEnsemble::new(vec![0.0; 4], 1).unwrap();
        let cfg = SchemeConfig::taming(TamingSpec::tanh(), 0.1, 1.0);
        let gen = NoiseGenerator::new(0, 20);
        assert!(step_particles(&ens, &gen.sample_step(0, 3, 1, 0.1, false), &spec.model, &cfg).is_err());
        assert!(step_particles(&ens, &gen.sample_step(0, 4, 1, 0.05, false), &spec.model, &cfg).is_err());
        assert!(step_particles(&ens, &gen.sample_step(0, 4, 1, 0.1, true), &spec.model, &cfg).is_err());
        let mut with_term = cfg.clone();
        with_term.include_measure_term = true;
        assert!(step_particles(&ens, &gen.sample_step(0, 4, 1, 0.1, false), &spec.model, &with_term).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SchemeConfig::classical(0.1, 1.0).validate().is_ok());
        assert!(SchemeConfig::classical(0.3, 1.0).validate().is_err());
        assert!(SchemeConfig::classical(0.0, 1.0).validate().is_err());
        assert!(SchemeConfig::taming(TamingSpec::identity(), 0.1, 1.0).validate().is_err());
        let mix = TamingSpec::from_kinds([TamingKind::Tanh, TamingKind::Identity, TamingKind::Tanh, TamingKind::Tanh]);
        assert!(SchemeConfig::taming(mix, 0.1, 1.0).validate().is_err());
        let mut c = SchemeConfig::taming(TamingSpec::tanh(), 2f64.powi(-12), 1.0);
        assert_eq!(c.steps(), 4096);
        c.include_measure_term = true;
        assert!(c.validate_for(64).is_ok());
        assert!(c.validate_for(65).is_err());
    }

    #[test]
    fn blown_particles_freeze_on_the_threshold_sphere() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case1()), InitialLaw::PointMass { at: vec![0.0] }).unwrap();
        let mut cfg = SchemeConfig::classical(2f64.powi(-6), 1.0);
        cfg.blow_up_threshold = 1e6;
        let ens = ParticleEnsemble::new(vec![400.0, 0.5], 1).unwrap();
        let noise = NoiseBlock::from_parts(cfg.dt, 2, 1, vec![0.0, 0.0], None).unwrap();
        let a = step_particles(&ens, &noise, &spec.model, &cfg).unwrap();
        assert_eq!(a.blown_up()[0], Some(cfg.dt));
        assert_eq!(a.state(0)[0].abs(), 1e6);
        assert!(a.blown_up()[1].is_none());
        let b = step_particles(&a, &noise, &spec.model, &cfg).unwrap();
        assert_eq!(b.state(0), a.state(0));
        assert_eq!(b.blown_up()[0], Some(cfg.dt));
    }

    #[test]
    fn sentinel_for_non_finite_updates() {
        let mut out = [f64::NAN, 1.0];
        freeze_at_sentinel(&mut out, &[3.0, 4.0], f64::NAN, 10.0);
        assert_eq!(out, [6.0, 8.0]);
        let mut out = [f64::INFINITY];
        freeze_at_sentinel(&mut out, &[0.0], f64::INFINITY, 10.0);
        assert_eq!(out, [10.0]);
    }

    #[test]
    fn runs_are_reproducible_across_pools() {
        let spec = ModelSpec::new(Model::DoubleWell(DoubleWell::case1()), DoubleWell::case1_initial_law()).unwrap();
        let cfg = SchemeConfig::taming(TamingSpec::sine(), 2f64.powi(-6), 0.25);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_simulation(&spec, &cfg, 50, 7, &[]).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        assert_eq!(a.snapshots.len(), 2);
        assert_eq!(a.snapshots[1].time, 0.25);
    }

    #[test]
    fn snapshot_grid_checks() {
        let cfg = SchemeConfig::classical(0.25, 1.0);
        assert_eq!(snapshot_steps(&cfg, &[1.0, 0.0, 0.5, 0.5]).unwrap(), vec![0, 2, 4]);
        assert!(snapshot_steps(&cfg, &[0.3]).is_err());
        assert!(snapshot_steps(&cfg, &[1.25]).is_err());
    }

    #[test]
    fn snapshot_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let ens = ParticleEnsemble::new(vec![1.5, -2.0, 0.0, 0.25], 2).unwrap();
        write_snapshots_csv(&path, &[Snapshot { time: 0.5, ensemble: ens }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "time,particle,coord_0,coord_1,blown_up\n0.5,0,1.5,-2,0\n0.5,1,0,0.25,0\n");
    }
}

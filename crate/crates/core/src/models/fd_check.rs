use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Coefficients, ModelSpec};
use crate::error::{Error, Result};
use crate::measure::MeasureView;

/// Central-difference step used for both the state and the particle
/// perturbations.
pub const FD_STEP: f64 = 1e-6;

/// Particles in each random probe ensemble.
const PROBE_PARTICLES: usize = 5;

/// Denominator floor when an analytic derivative is (near) zero.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub model: String,
    pub trials: usize,
    /// Trials skipped because the stencil crossed a non-smooth point.
    pub skipped: usize,
    pub tol: f64,
    /// Largest relative error of `∂_y g_j` against central differences in `y`.
    pub max_rel_err_state: f64,
    /// Largest relative error of `∂_ρ g_j` against particle perturbation.
    pub max_rel_err_measure: f64,
    pub passed: bool,
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(REL_FLOOR);
    let err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    err / scale
}

/// Compares the hand-derived Jacobians and Lions derivatives of `spec`
/// against finite differences at random states and small random ensembles.
///
/// The Lions derivative at particle `zᵏ` is checked column by column via
/// `N (g(y, ρ⁺) − g(y, ρ⁻)) / 2h`, where `ρ^±` moves `zᵏ` by `±h e_u`.
/// Failures are reported, never returned as errors.
pub fn check_derivatives_fd(
    spec: &ModelSpec,
    trial_count: usize,
    rng_seed: u64,
    tol: f64,
) -> Result<DerivativeReport> {
    let bounds = spec.model.probe_box();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = || -> Vec<f64> {
        bounds
            .iter()
            .map(|&(lo, hi)| {
                // stay strictly inside bounded coordinates
                let u: f64 = rng.random();
                lo + (hi - lo) * (0.02 + 0.96 * u)
            })
            .collect()
    };
    let probes: Vec<Probe> = (0..trial_count)
        .map(|_| {
            let y = draw();
            let particles = (0..PROBE_PARTICLES).flat_map(|_| draw()).collect();
            Probe { y, particles }
        })
        .collect();
    let mut report = check_at(&spec.model, &probes, tol)?;
    report.model = spec.name().to_string();
    Ok(report)
}

/// One probe point: a query state and the ensemble behind the measure.
#[derive(Debug, Clone)]
pub(crate) struct Probe {
    pub y: Vec<f64>,
    pub particles: Vec<f64>,
}

pub(crate) fn check_at(
    model: &dyn Coefficients,
    probes: &[Probe],
    tol: f64,
) -> Result<DerivativeReport> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let d = model.dim();
    let m = model.noise_dim();
    let h = FD_STEP;
    let mut report = DerivativeReport {
        model: String::new(),
        trials: probes.len(),
        skipped: 0,
        tol,
        max_rel_err_state: 0.0,
        max_rel_err_measure: 0.0,
        passed: false,
    };

    let mut analytic = vec![0.0; d * d];
    let mut numeric = vec![0.0; d * d];
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    for Probe { y, particles } in probes {
        if !model.smooth_around(y, h) {
            report.skipped += 1;
            continue;
        }
        let n = particles.len() / d;
        let mv = MeasureView::new(particles, d)?;

        for j in 0..m {
            model.diffusion_jacobian(j, y, &mv, &mut analytic);
            for c in 0..d {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[c] += h;
                ym[c] -= h;
                model.diffusion(j, &yp, &mv, &mut gp);
                model.diffusion(j, &ym, &mv, &mut gm);
                for r in 0..d {
                    numeric[r * d + c] = (gp[r] - gm[r]) / (2.0 * h);
                }
            }
            report.max_rel_err_state = report.max_rel_err_state.max(rel_err(&analytic, &numeric));

            for k in 0..n {
                let z = &particles[k * d..(k + 1) * d];
                model.lions_derivative(j, y, &mv, z, &mut analytic);
                for u in 0..d {
                    let mut plus = particles.clone();
                    let mut minus = particles.clone();
                    plus[k * d + u] += h;
                    minus[k * d + u] -= h;
                    model.diffusion(j, y, &MeasureView::new(&plus, d)?, &mut gp);
                    model.diffusion(j, y, &MeasureView::new(&minus, d)?, &mut gm);
                    for r in 0..d {
                        numeric[r * d + u] = n as f64 * (gp[r] - gm[r]) / (2.0 * h);
                    }
                }
                report.max_rel_err_measure =
                    report.max_rel_err_measure.max(rel_err(&analytic, &numeric));
            }
        }
    }
    report.passed = report.max_rel_err_state <= tol
        && report.max_rel_err_measure <= tol
        && report.skipped < report.trials;
    Ok(report)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Coefficients, ModelSpec};
use crate::error::{Error, Result};
use crate::measure::MeasureView;

/// Sampled coercivity ratios
///
/// ```text
/// (2⟨y, f(y, ρ)⟩ + (p̄ − 1) Σ_j |g_j(y, ρ)|²) / (1 + |y|² + W₂²(ρ, δ₀))
/// ```
///
/// on spheres of growing radius. A coercive model keeps the maximum bounded
/// as the radius grows. This is a spot check, not a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub model: String,
    pub p_bar: f64,
    pub radii: Vec<f64>,
    pub max_ratio: Vec<f64>,
}

pub fn coercivity_spot_check(
    spec: &ModelSpec,
    p_bar: f64,
    radii: &[f64],
    samples: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    if !(p_bar >= 2.0) {
        return Err(Error::param("p_bar", "must be >= 2"));
    }
    if samples == 0 || radii.is_empty() {
        return Err(Error::param("samples", "need at least one sample and one radius"));
    }
    let model = &spec.model;
    let (d, m) = (model.dim(), model.noise_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut on_sphere = |r: f64| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x * r / n).collect()
    };
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut max_ratio = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..samples {
            let y = on_sphere(r);
            let ensemble: Vec<f64> = (0..4).flat_map(|_| on_sphere(r)).collect();
            let mv = MeasureView::new(&ensemble, d)?;
            model.drift(&y, &mv, &mut f);
            let mut g2 = 0.0;
            for j in 0..m {
                model.diffusion(j, &y, &mv, &mut g);
                g2 += g.iter().map(|x| x * x).sum::<f64>();
            }
            let inner: f64 = y.iter().zip(&f).map(|(a, b)| a * b).sum();
            let lhs = 2.0 * inner + (p_bar - 1.0) * g2;
            worst = worst.max(lhs / (1.0 + r * r + mv.mean_sq_norm()));
        }
        max_ratio.push(worst);
    }
    Ok(CoercivityReport {
        model: spec.name().to_string(),
        p_bar,
        radii: radii.to_vec(),
        max_ratio,
    })
}

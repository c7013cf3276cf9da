use serde::{Deserialize, Serialize};

use super::{Coefficients, InitialLaw};
use crate::measure::MeasureView;

/// Two-dimensional Cucker–Smale flocking model on `X = (v, x)` with a single
/// Brownian motion acting on the velocity:
///
/// ```text
/// f = ( −λ₁ v³ + 1 + λ₂ ∫ (v − z) dρ_v ,  v )
/// g = (  σ₁ v² + σ₂ ∫ (v − z) dρ_v ,      0 )
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuckerSmale {
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl CuckerSmale {
    pub fn case1() -> Self {
        Self {
            lambda1: 139.5,
            lambda2: -30.0,
            sigma1: 0.8,
            sigma2: 100.0,
        }
    }

    pub fn case1_initial_law() -> InitialLaw {
        InitialLaw::MultivariateNormal {
            mean: vec![20.0, 30.0],
            cov: vec![vec![4.0, 3.5], vec![3.5, 4.0]],
        }
    }

    pub fn case2() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: -0.5,
            sigma1: 0.01,
            sigma2: 0.01,
        }
    }

    pub fn case2_initial_law() -> InitialLaw {
        InitialLaw::IndependentNormal {
            mean: vec![0.0, 0.0],
            std_dev: vec![1.0, 1.0],
        }
    }
}

impl Coefficients for CuckerSmale {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let v = y[0];
        out[0] = -self.lambda1 * v * v * v + 1.0 + self.lambda2 * (v - mv.coord_mean(0));
        out[1] = v;
    }

    fn diffusion(&self, _j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let v = y[0];
        out[0] = self.sigma1 * v * v + self.sigma2 * (v - mv.coord_mean(0));
        out[1] = 0.0;
    }

    fn diffusion_jacobian(&self, _j: usize, y: &[f64], _mv: &MeasureView, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = 2.0 * self.sigma1 * y[0] + self.sigma2;
    }

    fn lions_derivative(&self, _j: usize, _y: &[f64], _mv: &MeasureView, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = -self.sigma2;
    }

    fn measure_dependent_diffusion(&self) -> bool {
        self.sigma2 != 0.0
    }
}

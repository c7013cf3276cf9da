use serde::{Deserialize, Serialize};

use super::{Coefficients, InitialLaw};
use crate::measure::MeasureView;

/// Mean-field double well:
///
/// ```text
/// f(y, ρ) = λ₁ y (1 − y²) + λ₂ ∫ z dρ
/// g(y, ρ) = μ₁ (1 − y²) + μ₂ ∫ sin(y − z) dρ
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl DoubleWell {
    pub fn case1() -> Self {
        Self {
            lambda1: 40.0,
            lambda2: 4.0,
            mu1: 0.3,
            mu2: 2.0,
        }
    }

    pub fn case1_initial_law() -> InitialLaw {
        InitialLaw::IndependentNormal {
            mean: vec![0.0],
            std_dev: vec![1.0],
        }
    }

    pub fn case2() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 1.0,
            mu1: 0.1,
            mu2: 0.1,
        }
    }

    pub fn case2_initial_law() -> InitialLaw {
        InitialLaw::PointMass { at: vec![0.0] }
    }
}

impl Coefficients for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let x = y[0];
        out[0] = self.lambda1 * x * (1.0 - x * x) + self.lambda2 * mv.coord_mean(0);
    }

    fn diffusion(&self, _j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let x = y[0];
        let interaction = if self.mu2 == 0.0 {
            0.0
        } else {
            mv.kernel_mean(|z| (x - z[0]).sin())
        };
        out[0] = self.mu1 * (1.0 - x * x) + self.mu2 * interaction;
    }

    fn diffusion_jacobian(&self, _j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let x = y[0];
        let interaction = if self.mu2 == 0.0 {
            0.0
        } else {
            mv.kernel_mean(|z| (x - z[0]).cos())
        };
        out[0] = -2.0 * self.mu1 * x + self.mu2 * interaction;
    }

    fn diffusion_with_jacobian(
        &self,
        _j: usize,
        y: &[f64],
        mv: &MeasureView,
        g: &mut [f64],
        jac: &mut [f64],
    ) {
        let x = y[0];
        let (s, c) = if self.mu2 == 0.0 {
            (0.0, 0.0)
        } else {
            mv.kernel_mean2(|z| (x - z[0]).sin_cos())
        };
        g[0] = self.mu1 * (1.0 - x * x) + self.mu2 * s;
        jac[0] = -2.0 * self.mu1 * x + self.mu2 * c;
    }

    fn lions_derivative(&self, _j: usize, y: &[f64], _mv: &MeasureView, z: &[f64], out: &mut [f64]) {
        out[0] = -self.mu2 * (y[0] - z[0]).cos();
    }

    fn measure_dependent_diffusion(&self) -> bool {
        self.mu2 != 0.0
    }
}

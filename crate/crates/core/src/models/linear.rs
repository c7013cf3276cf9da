use serde::{Deserialize, Serialize};

use super::Coefficients;
use crate::measure::MeasureView;

/// Scalar geometric Brownian motion `dX = a X dt + b X dW`, no measure
/// dependence. Its closed-form solution serves as a strong-error oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearBenchmark {
    pub a: f64,
    pub b: f64,
}

impl Default for LinearBenchmark {
    fn default() -> Self {
        Self { a: 1.0, b: 0.8 }
    }
}

impl LinearBenchmark {
    /// `X_t = X₀ exp((a − b²/2) t + b W_t)`.
    pub fn exact(&self, x0: f64, t: f64, w_t: f64) -> f64 {
        x0 * ((self.a - 0.5 * self.b * self.b) * t + self.b * w_t).exp()
    }
}

impl Coefficients for LinearBenchmark {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, y: &[f64], _mv: &MeasureView, out: &mut [f64]) {
        out[0] = self.a * y[0];
    }

    fn diffusion(&self, _j: usize, y: &[f64], _mv: &MeasureView, out: &mut [f64]) {
        out[0] = self.b * y[0];
    }

    fn diffusion_jacobian(&self, _j: usize, _y: &[f64], _mv: &MeasureView, out: &mut [f64]) {
        out[0] = self.b;
    }

    fn lions_derivative(&self, _j: usize, _y: &[f64], _mv: &MeasureView, _z: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn measure_dependent_diffusion(&self) -> bool {
        false
    }
}

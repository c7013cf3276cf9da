use serde::{Deserialize, Serialize};

use super::{Coefficients, InitialLaw};
use crate::measure::MeasureView;

/// FitzHugh–Nagumo neuron population with chemical synapses. The state is
/// `X = (x₁, x₂, x₃)` with `x₁` the membrane potential and `x₃` the synaptic
/// gating fraction; each coordinate has its own Brownian motion.
///
/// ```text
/// f₁ = x₁ − κ x₁³ − x₂ + I − J (x₁ − V_rev) ∫ z₃ dρ
/// f₂ = c (x₁ + a − b x₂)
/// f₃ = a_r T_max (1 − x₃) φ(x₁) − a_d x₃,     φ(x) = 1 / (1 + e^{−λ (x − V_T)})
///
/// g₁ = (σ_ext, 0, 0)
/// g₂ = (0, 0, σ₃₂(x))
/// g₃ = (−σ_J (x₁ − V_rev) ∫ z₃ dρ, 0, 0)
///
/// σ₃₂(x) = 𝟙{x₃ ∈ (0,1)} √(a_r T_max (1 − x₃) φ(x₁) + a_d x₃) Γ exp(−Λ / (1 − (2x₃ − 1)²))
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitzHughNagumo {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(rename = "I")]
    pub input_current: f64,
    pub sigma_ext: f64,
    #[serde(rename = "V_rev")]
    pub v_rev: f64,
    pub a_r: f64,
    pub a_d: f64,
    #[serde(rename = "T_max")]
    pub t_max: f64,
    pub lambda: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "sigma_J")]
    pub sigma_j: f64,
    #[serde(rename = "V_T")]
    pub v_t: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    /// Coefficient κ of the cubic term in `f₁`.
    pub cubic: f64,
}

impl Default for FitzHughNagumo {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.8,
            c: 0.08,
            input_current: 0.5,
            sigma_ext: 0.5,
            v_rev: 1.0,
            a_r: 1.0,
            a_d: 1.0,
            t_max: 1.0,
            lambda: 0.2,
            j: 1.0,
            sigma_j: 0.2,
            v_t: 2.0,
            gamma: 0.1,
            big_lambda: 0.5,
            cubic: 35.0,
        }
    }
}

impl FitzHughNagumo {
    /// `X₀ = (V₀, w₀, x₀) = (0, 1, 0.5)`.
    pub fn initial_law() -> InitialLaw {
        InitialLaw::PointMass {
            at: vec![0.0, 1.0, 0.5],
        }
    }

    fn sigmoid(&self, x1: f64) -> f64 {
        1.0 / (1.0 + (-self.lambda * (x1 - self.v_t)).exp())
    }

    fn gating_rate(&self, x1: f64, x3: f64) -> f64 {
        self.a_r * self.t_max * (1.0 - x3) * self.sigmoid(x1) + self.a_d * x3
    }

    fn mollifier(&self, x3: f64) -> f64 {
        let q = 1.0 - (2.0 * x3 - 1.0).powi(2);
        self.gamma * (-self.big_lambda / q).exp()
    }

    /// `σ₃₂(x)`; exactly zero off the open unit interval in `x₃`.
    pub fn sigma32(&self, y: &[f64]) -> f64 {
        let x3 = y[2];
        if !(x3 > 0.0 && x3 < 1.0) {
            return 0.0;
        }
        self.gating_rate(y[0], x3).sqrt() * self.mollifier(x3)
    }

    /// `(∂σ₃₂/∂x₁, ∂σ₃₂/∂x₃)`.
    fn sigma32_grad(&self, y: &[f64]) -> (f64, f64) {
        let (x1, x3) = (y[0], y[2]);
        if !(x3 > 0.0 && x3 < 1.0) {
            return (0.0, 0.0);
        }
        let phi = self.sigmoid(x1);
        let s = self.gating_rate(x1, x3);
        let root = s.sqrt();
        let e = self.mollifier(x3);
        let ds_dx1 = self.a_r * self.t_max * (1.0 - x3) * self.lambda * phi * (1.0 - phi);
        let ds_dx3 = -self.a_r * self.t_max * phi + self.a_d;
        let q = 4.0 * x3 * (1.0 - x3);
        let de_dx3 = -e * self.big_lambda * 4.0 * (2.0 * x3 - 1.0) / (q * q);
        let half_inv_root = if root > 0.0 { 0.5 / root } else { 0.0 };
        (
            e * ds_dx1 * half_inv_root,
            e * ds_dx3 * half_inv_root + root * de_dx3,
        )
    }
}

impl Coefficients for FitzHughNagumo {
    fn dim(&self) -> usize {
        3
    }

    fn noise_dim(&self) -> usize {
        3
    }

    fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        let (x1, x2, x3) = (y[0], y[1], y[2]);
        let z3 = mv.coord_mean(2);
        out[0] = x1 - self.cubic * x1 * x1 * x1 - x2 + self.input_current
            - self.j * (x1 - self.v_rev) * z3;
        out[1] = self.c * (x1 + self.a - self.b * x2);
        out[2] = self.a_r * self.t_max * (1.0 - x3) * self.sigmoid(x1) - self.a_d * x3;
    }

    fn diffusion(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        out.fill(0.0);
        match j {
            0 => out[0] = self.sigma_ext,
            1 => out[2] = self.sigma32(y),
            _ => out[0] = -self.sigma_j * (y[0] - self.v_rev) * mv.coord_mean(2),
        }
    }

    fn diffusion_jacobian(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        out.fill(0.0);
        match j {
            0 => {}
            1 => {
                let (d1, d3) = self.sigma32_grad(y);
                out[6] = d1;
                out[8] = d3;
            }
            _ => out[0] = -self.sigma_j * mv.coord_mean(2),
        }
    }

    fn lions_derivative(&self, j: usize, y: &[f64], _mv: &MeasureView, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if j == 2 {
            out[2] = -self.sigma_j * (y[0] - self.v_rev);
        }
    }

    fn measure_dependent_diffusion(&self) -> bool {
        self.sigma_j != 0.0
    }

    fn smooth_around(&self, y: &[f64], h: f64) -> bool {
        let x3 = y[2];
        let straddles = |edge: f64| (x3 - h..=x3 + h).contains(&edge);
        !(straddles(0.0) || straddles(1.0))
    }

    fn probe_box(&self) -> Vec<(f64, f64)> {
        vec![(-2.0, 2.0), (-2.0, 2.0), (0.0, 1.0)]
    }
}

//! McKean–Vlasov coefficient models.
//!
//! A model supplies the drift `f(y, ρ)`, the diffusion columns `g_j(y, ρ)`,
//! their state Jacobians `∂_y g_j` and Lions derivatives `∂_ρ g_j(y, ρ, z)`.
//! Measure dependence is always evaluated against a [`MeasureView`].
//!
//! Column indices are zero-based inside the [`Coefficients`] trait and
//! one-based on the checked [`ModelSpec`] operations.

mod cucker_smale;
mod dissipativity;
mod double_well;
mod fd_check;
mod fitzhugh_nagumo;
mod initial_law;
mod linear;

pub use cucker_smale::CuckerSmale;
pub use dissipativity::{coercivity_spot_check, CoercivityReport};
pub use double_well::DoubleWell;
pub use fd_check::{check_derivatives_fd, DerivativeReport};
pub use fitzhugh_nagumo::FitzHughNagumo;
pub use initial_law::InitialLaw;
pub use linear::LinearBenchmark;

use crate::error::{Error, Result};
use crate::measure::MeasureView;

/// Hot-path coefficient evaluators. Inputs are assumed well-shaped.
///
/// Jacobians and Lions derivatives are written row-major into a `d×d`
/// buffer: `out[r * d + c] = ∂ g_r / ∂ y_c`.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]);
    fn diffusion(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]);
    fn diffusion_jacobian(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]);
    fn lions_derivative(&self, j: usize, y: &[f64], mv: &MeasureView, z: &[f64], out: &mut [f64]);

    /// Column and Jacobian together; models whose two evaluations share a
    /// pass over the measure override this.
    fn diffusion_with_jacobian(
        &self,
        j: usize,
        y: &[f64],
        mv: &MeasureView,
        g: &mut [f64],
        jac: &mut [f64],
    ) {
        self.diffusion(j, y, mv, g);
        self.diffusion_jacobian(j, y, mv, jac);
    }

    /// Whether any diffusion column depends on the measure. When `false` the
    /// Lions correction vanishes identically.
    fn measure_dependent_diffusion(&self) -> bool;

    /// `false` when a central-difference stencil of half-width `h` around `y`
    /// crosses a point where the coefficients are not differentiable.
    fn smooth_around(&self, _y: &[f64], _h: f64) -> bool {
        true
    }

    /// Box from which derivative probes draw states.
    fn probe_box(&self) -> Vec<(f64, f64)> {
        vec![(-2.0, 2.0); self.dim()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    DoubleWell(DoubleWell),
    CuckerSmale(CuckerSmale),
    FitzHughNagumo(FitzHughNagumo),
    LinearBenchmark(LinearBenchmark),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $body:expr) => {
        match $self {
            Model::DoubleWell($m) => $body,
            Model::CuckerSmale($m) => $body,
            Model::FitzHughNagumo($m) => $body,
            Model::LinearBenchmark($m) => $body,
        }
    };
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::DoubleWell(_) => "double_well",
            Model::CuckerSmale(_) => "cucker_smale",
            Model::FitzHughNagumo(_) => "fitzhugh_nagumo",
            Model::LinearBenchmark(_) => "linear_benchmark",
        }
    }
}

impl Coefficients for Model {
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn noise_dim(&self) -> usize {
        dispatch!(self, m => m.noise_dim())
    }
    fn drift(&self, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        dispatch!(self, m => m.drift(y, mv, out))
    }
    fn diffusion(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        dispatch!(self, m => m.diffusion(j, y, mv, out))
    }
    fn diffusion_jacobian(&self, j: usize, y: &[f64], mv: &MeasureView, out: &mut [f64]) {
        dispatch!(self, m => m.diffusion_jacobian(j, y, mv, out))
    }
    fn lions_derivative(&self, j: usize, y: &[f64], mv: &MeasureView, z: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.lions_derivative(j, y, mv, z, out))
    }
    fn diffusion_with_jacobian(
        &self,
        j: usize,
        y: &[f64],
        mv: &MeasureView,
        g: &mut [f64],
        jac: &mut [f64],
    ) {
        dispatch!(self, m => m.diffusion_with_jacobian(j, y, mv, g, jac))
    }
    fn measure_dependent_diffusion(&self) -> bool {
        dispatch!(self, m => m.measure_dependent_diffusion())
    }
    fn smooth_around(&self, y: &[f64], h: f64) -> bool {
        dispatch!(self, m => m.smooth_around(y, h))
    }
    fn probe_box(&self) -> Vec<(f64, f64)> {
        dispatch!(self, m => m.probe_box())
    }
}

/// A coefficient model together with the law of its initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model: Model,
    pub initial_law: InitialLaw,
}

impl ModelSpec {
    pub fn new(model: Model, initial_law: InitialLaw) -> Result<Self> {
        initial_law.validate()?;
        if initial_law.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "initial law",
                expected: model.dim(),
                actual: initial_law.dim(),
            });
        }
        Ok(Self { model, initial_law })
    }

    pub fn name(&self) -> &'static str {
        self.model.name()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.model.noise_dim()
    }

    fn check_state(&self, y: &[f64], mv: &MeasureView, context: &'static str) -> Result<()> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                actual: y.len(),
            });
        }
        if mv.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "measure dimension",
                expected: d,
                actual: mv.dim(),
            });
        }
        if let Some((index, &value)) = y.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(())
    }

    fn column(&self, j: usize, context: &'static str) -> Result<usize> {
        let m = self.noise_dim();
        if j == 0 || j > m {
            return Err(Error::IndexOutOfRange {
                context,
                index: j,
                max: m,
            });
        }
        Ok(j - 1)
    }

    /// `f(y, ρ)`.
    pub fn drift_eval(&self, y: &[f64], mv: &MeasureView) -> Result<Vec<f64>> {
        self.check_state(y, mv, "drift state")?;
        let mut out = vec![0.0; self.dim()];
        self.model.drift(y, mv, &mut out);
        Ok(out)
    }

    /// `g_j(y, ρ)` for `j` in `1..=m`.
    pub fn diffusion_eval(&self, j: usize, y: &[f64], mv: &MeasureView) -> Result<Vec<f64>> {
        self.check_state(y, mv, "diffusion state")?;
        let j = self.column(j, "diffusion column")?;
        let mut out = vec![0.0; self.dim()];
        self.model.diffusion(j, y, mv, &mut out);
        Ok(out)
    }

    /// `L_y^{j2} g_{j1} = ∂_y g_{j1}(y, ρ) · g_{j2}(y, ρ)`.
    pub fn l_y_eval(&self, j1: usize, j2: usize, y: &[f64], mv: &MeasureView) -> Result<Vec<f64>> {
        self.check_state(y, mv, "L_y state")?;
        let j1 = self.column(j1, "L_y column j1")?;
        let j2 = self.column(j2, "L_y column j2")?;
        let d = self.dim();
        let mut jac = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        self.model.diffusion_jacobian(j1, y, mv, &mut jac);
        self.model.diffusion(j2, y, mv, &mut g);
        Ok(mat_vec(&jac, &g))
    }

    /// `L_ρ^{j2} g_{j1}(y, ρ, z) = ∂_ρ g_{j1}(y, ρ, z) · g_{j2}(z, ρ)`.
    pub fn l_rho_eval(
        &self,
        j1: usize,
        j2: usize,
        y: &[f64],
        mv: &MeasureView,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_state(y, mv, "L_rho state")?;
        self.check_state(z, mv, "L_rho measure point")?;
        let j1 = self.column(j1, "L_rho column j1")?;
        let j2 = self.column(j2, "L_rho column j2")?;
        let d = self.dim();
        let mut lions = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        self.model.lions_derivative(j1, y, mv, z, &mut lions);
        self.model.diffusion(j2, z, mv, &mut g);
        Ok(mat_vec(&lions, &g))
    }
}

pub(crate) fn mat_vec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    a.chunks_exact(d)
        .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
        .collect()
}

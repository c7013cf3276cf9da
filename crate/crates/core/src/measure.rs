//! Empirical measure `ρ^N = (1/N) Σ δ_{Yⁱ}` of a particle ensemble.
//!
//! A [`MeasureView`] is an immutable snapshot. Particles are stored in a
//! canonical (lexicographic) order so every reduction over the measure is
//! independent of particle labelling and of the thread count, bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureView {
    d: usize,
    /// Row-major N×d, canonically sorted.
    points: Vec<f64>,
    mean: Vec<f64>,
    mean_sq_norm: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl MeasureView {
    /// Builds the snapshot from row-major `states` of dimension `d`.
    pub fn new(states: &[f64], d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("d", "state dimension must be positive"));
        }
        if states.is_empty() || states.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                context: "measure snapshot",
                expected: d,
                actual: states.len(),
            });
        }
        let mut rows: Vec<&[f64]> = states.chunks_exact(d).collect();
        rows.sort_by(|a, b| lex_cmp(a, b));
        let points: Vec<f64> = rows.concat();
        let n = rows.len();

        let mut mean = vec![0.0; d];
        let mut sq = 0.0;
        for p in points.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
            sq += p.iter().map(|x| x * x).sum::<f64>();
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(Self {
            d,
            points,
            mean,
            mean_sq_norm: sq / n as f64,
        })
    }

    /// Point mass at `y`.
    pub fn dirac(y: &[f64]) -> Result<Self> {
        Self::new(y, y.len())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.d)
    }

    /// Ensemble mean `∫ z dρ`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn coord_mean(&self, c: usize) -> f64 {
        self.mean[c]
    }

    /// `(1/N) Σ |zᵏ|²`.
    pub fn mean_sq_norm(&self) -> f64 {
        self.mean_sq_norm
    }

    /// `W₂(ρ^N, δ₀) = √((1/N) Σ |zᵏ|²)`, exact since the target is a point mass.
    pub fn w2_to_origin(&self) -> f64 {
        self.mean_sq_norm.sqrt()
    }

    /// `∫ k(z) dρ(z)`, summed in canonical order.
    pub fn kernel_mean<F>(&self, mut kernel: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        let s: f64 = self.points().map(&mut kernel).sum();
        s / self.len() as f64
    }

    /// Two kernels in one pass.
    pub fn kernel_mean2<F>(&self, mut kernel: F) -> (f64, f64)
    where
        F: FnMut(&[f64]) -> (f64, f64),
    {
        let (mut a, mut b) = (0.0, 0.0);
        for p in self.points() {
            let (x, y) = kernel(p);
            a += x;
            b += y;
        }
        let n = self.len() as f64;
        (a / n, b / n)
    }

    /// `(1/N) Σ |zᵏ|ᵖ`.
    pub fn moment(&self, p: f64) -> f64 {
        self.kernel_mean(|z| z.iter().map(|x| x * x).sum::<f64>().powf(p / 2.0))
    }
}

/// Upper bound `W₂(μ, ν)² ≤ 2 ∫|x|² dμ + 2 ∫|y|² dν`, obtained by coupling
/// both measures through `δ₀`.
pub fn w2_squared_moment_bound(a: &MeasureView, b: &MeasureView) -> f64 {
    2.0 * a.mean_sq_norm() + 2.0 * b.mean_sq_norm()
}

/// Exact `W₂` between two equally sized one-dimensional empirical measures
/// (sorted matching is the optimal coupling on the line).
pub fn w2_empirical_1d(a: &MeasureView, b: &MeasureView) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "w2_empirical_1d",
            expected: 1,
            actual: a.dim().max(b.dim()),
        });
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "w2_empirical_1d particle counts",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let s: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((s / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_ensemble() {
        let c = [1.25, -3.0];
        let states: Vec<f64> = c.iter().copied().cycle().take(2 * 7).collect();
        let mv = MeasureView::new(&states, 2).unwrap();
        assert_eq!(mv.len(), 7);
        assert_eq!(mv.mean(), &c);
        let norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
        assert!((mv.w2_to_origin() - norm).abs() < 1e-15);
    }

    #[test]
    fn single_particle_w2() {
        let mv = MeasureView::new(&[3.0, 4.0], 2).unwrap();
        assert_eq!(mv.w2_to_origin(), 5.0);
    }

    #[test]
    fn sine_kernel_vanishes_on_a_point_mass() {
        let y = 0.731;
        let mv = MeasureView::new(&[y; 9], 1).unwrap();
        assert_eq!(mv.kernel_mean(|z| (y - z[0]).sin()), 0.0);
    }

    #[test]
    fn reductions_ignore_particle_order() {
        let a = [0.1, 0.7, -2.3, 1e-3, 5.5, 0.1, 3.3, -0.2];
        let b: Vec<f64> = a.chunks_exact(2).rev().flatten().copied().collect();
        let ma = MeasureView::new(&a, 2).unwrap();
        let mb = MeasureView::new(&b, 2).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.kernel_mean(|z| z[0].sin()), mb.kernel_mean(|z| z[0].sin()));
    }

    #[test]
    fn rejects_ragged_input() {
        assert!(MeasureView::new(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(MeasureView::new(&[], 1).is_err());
        assert!(MeasureView::new(&[1.0], 0).is_err());
    }

    #[test]
    fn one_dimensional_w2() {
        let a = MeasureView::new(&[0.0, 2.0], 1).unwrap();
        let b = MeasureView::new(&[3.0, 1.0], 1).unwrap();
        // sorted matching: (0,1), (2,3)
        assert!((w2_empirical_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(w2_empirical_1d(&a, &b).unwrap().powi(2) <= w2_squared_moment_bound(&a, &b));
    }

    #[test]
    fn moments() {
        let mv = MeasureView::new(&[1.0, -2.0], 1).unwrap();
        assert!((mv.moment(4.0) - 8.5).abs() < 1e-12);
        assert!((mv.moment(2.0) - mv.mean_sq_norm()).abs() < 1e-12);
    }
}

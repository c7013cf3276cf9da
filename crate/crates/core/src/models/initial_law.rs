use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    PointMass { at: Vec<f64> },
    /// Product of univariate normals.
    IndependentNormal { mean: Vec<f64>, std_dev: Vec<f64> },
    MultivariateNormal { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass { at } => at.len(),
            InitialLaw::IndependentNormal { mean, .. } => mean.len(),
            InitialLaw::MultivariateNormal { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::param(name, "must be finite"))
            }
        };
        if self.dim() == 0 {
            return Err(Error::param("initial_law", "dimension must be positive"));
        }
        match self {
            InitialLaw::PointMass { at } => finite("initial_law.at", at),
            InitialLaw::IndependentNormal { mean, std_dev } => {
                finite("initial_law.mean", mean)?;
                if std_dev.len() != mean.len() {
                    return Err(Error::param(
                        "initial_law.std_dev",
                        "length must match mean",
                    ));
                }
                if std_dev.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                    return Err(Error::param("initial_law.std_dev", "must be finite and >= 0"));
                }
                Ok(())
            }
            InitialLaw::MultivariateNormal { mean, cov } => {
                finite("initial_law.mean", mean)?;
                cholesky(cov, mean.len()).map(|_| ())
            }
        }
    }

    /// Draws one state into `out`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::PointMass { at } => out.copy_from_slice(at),
            InitialLaw::IndependentNormal { mean, std_dev } => {
                for ((o, m), s) in out.iter_mut().zip(mean).zip(std_dev) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + s * z;
                }
            }
            InitialLaw::MultivariateNormal { mean, cov } => {
                let d = mean.len();
                let l = cholesky(cov, d).expect("covariance validated on construction");
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                for r in 0..d {
                    out[r] = mean[r] + (0..=r).map(|c| l[r * d + c] * z[c]).sum::<f64>();
                }
            }
        }
    }
}

/// Lower Cholesky factor (row-major) of a symmetric positive semi-definite
/// matrix. Zero pivots are allowed and produce a zero column.
fn cholesky(cov: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    if cov.len() != d || cov.iter().any(|row| row.len() != d) {
        return Err(Error::param("initial_law.cov", format!("must be {d}x{d}")));
    }
    let scale = cov
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    for r in 0..d {
        for c in 0..r {
            if (cov[r][c] - cov[c][r]).abs() > tol || !cov[r][c].is_finite() {
                return Err(Error::param("initial_law.cov", "must be symmetric"));
            }
        }
    }
    let mut l = vec![0.0f64; d * d];
    for c in 0..d {
        let pivot = cov[c][c] - (0..c).map(|k| l[c * d + k].powi(2)).sum::<f64>();
        if pivot < -tol {
            return Err(Error::param("initial_law.cov", "must be positive semi-definite"));
        }
        let diag = pivot.max(0.0).sqrt();
        l[c * d + c] = diag;
        for r in c + 1..d {
            let v = cov[r][c] - (0..c).map(|k| l[r * d + k] * l[c * d + k]).sum::<f64>();
            if diag > tol.sqrt() {
                l[r * d + c] = v / diag;
            } else if v.abs() > tol {
                return Err(Error::param("initial_law.cov", "must be positive semi-definite"));
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cholesky_of_paper_covariance() {
        let cov = vec![vec![4.0, 3.5], vec![3.5, 4.0]];
        let l = cholesky(&cov, 2).unwrap();
        // L Lᵀ reproduces cov
        assert!((l[0] * l[0] - 4.0).abs() < 1e-12);
        assert!((l[2] * l[0] - 3.5).abs() < 1e-12);
        assert!((l[2] * l[2] + l[3] * l[3] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(cholesky(&[vec![1.0, 2.0], vec![2.0, 1.0]], 2).is_err());
        assert!(cholesky(&[vec![1.0, 0.5], vec![0.4, 1.0]], 2).is_err());
        assert!(cholesky(&[vec![1.0]], 2).is_err());
    }

    #[test]
    fn accepts_singular_psd() {
        let l = cholesky(&[vec![1.0, 1.0], vec![1.0, 1.0]], 2).unwrap();
        assert_eq!(l[3], 0.0);
        let law = InitialLaw::MultivariateNormal {
            mean: vec![0.0, 0.0],
            cov: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = [0.0; 2];
        law.sample(&mut rng, &mut out);
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn sample_moments() {
        let law = InitialLaw::MultivariateNormal {
            mean: vec![20.0, 30.0],
            cov: vec![vec![4.0, 3.5], vec![3.5, 4.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut s0, mut s1, mut s01) = (0.0, 0.0, 0.0);
        let mut out = [0.0; 2];
        for _ in 0..n {
            law.sample(&mut rng, &mut out);
            let (a, b) = (out[0] - 20.0, out[1] - 30.0);
            s0 += a * a;
            s1 += b * b;
            s01 += a * b;
        }
        let n = n as f64;
        assert!((s0 / n - 4.0).abs() < 0.05);
        assert!((s1 / n - 4.0).abs() < 0.05);
        assert!((s01 / n - 3.5).abs() < 0.05);
    }

    #[test]
    fn serde_shape() {
        let law: InitialLaw =
            serde_json::from_str(r#"{"kind":"independent_normal","mean":[0],"std_dev":[1]}"#)
                .unwrap();
        assert_eq!(law.dim(), 1);
        assert!(serde_json::from_str::<InitialLaw>(r#"{"kind":"point_mass","at":[0],"x":1}"#)
            .is_err());
    }
}

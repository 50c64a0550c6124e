//! Gaussian measurement-noise models.
//!
//! A noise model turns raw residuals into whitened ones (unit covariance)
//! and carries the log normalization constant of the underlying Gaussian
//! density, so factor log-likelihoods can be exact rather than just
//! proportional.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("covariance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    /// Per-axis standard deviations.
    Diagonal { inv_sigmas: DVector<f64> },
    /// Lower-triangular L with L * L^T = covariance^{-1}... stored as the
    /// whitening operator W = chol(cov).inverse() so that W r has unit
    /// covariance.
    Full { whiten: DMatrix<f64> },
}

/// Gaussian noise model (diagonal or full covariance).
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    dim: usize,
    kind: Kind,
    /// -(d/2) ln(2 pi) - 1/2 ln |cov|
    log_norm: f64,
}

impl Noise {
    /// Same sigma on every axis.
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, NoiseError> {
        Self::diagonal(&vec![sigma; dim])
    }

    /// Independent per-axis sigmas.
    pub fn diagonal(sigmas: &[f64]) -> Result<Self, NoiseError> {
        for &s in sigmas {
            if !(s.is_finite() && s > 0.0) {
                return Err(NoiseError::BadSigma(s));
            }
        }
        let dim = sigmas.len();
        let ln_det: f64 = sigmas.iter().map(|s| 2.0 * s.ln()).sum();
        Ok(Noise {
            dim,
            kind: Kind::Diagonal {
                inv_sigmas: DVector::from_iterator(dim, sigmas.iter().map(|s| 1.0 / s)),
            },
            log_norm: -0.5 * (dim as f64 * LN_2PI + ln_det),
        })
    }

    /// Full covariance matrix; must be symmetric positive definite.
    pub fn full_covariance(cov: DMatrix<f64>) -> Result<Self, NoiseError> {
        if cov.nrows() != cov.ncols() {
            return Err(NoiseError::NotSquare { rows: cov.nrows(), cols: cov.ncols() });
        }
        let dim = cov.nrows();
        let chol = cov.clone().cholesky().ok_or(NoiseError::NotPositiveDefinite)?;
        let ln_det: f64 = (0..dim).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum();
        let whiten = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or(NoiseError::NotPositiveDefinite)?;
        Ok(Noise { dim, kind: Kind::Full { whiten }, log_norm: -0.5 * (dim as f64 * LN_2PI + ln_det) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log of the Gaussian normalization constant (density at zero whitened
    /// residual).
    pub fn log_norm_constant(&self) -> f64 {
        self.log_norm
    }

    /// Map a raw residual to a unit-covariance one.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(r.len(), self.dim);
        match &self.kind {
            Kind::Diagonal { inv_sigmas } => r.component_mul(inv_sigmas),
            Kind::Full { whiten } => whiten * r,
        }
    }

    /// Whiten a Jacobian block in place (rows = residual axes).
    pub fn whiten_jacobian(&self, j: &mut DMatrix<f64>) {
        debug_assert_eq!(j.nrows(), self.dim);
        match &self.kind {
            Kind::Diagonal { inv_sigmas } => {
                for (i, inv) in inv_sigmas.iter().enumerate() {
                    j.row_mut(i).scale_mut(*inv);
                }
            }
            Kind::Full { whiten } => {
                let out = whiten * &*j;
                j.copy_from(&out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_whitening_divides_by_sigma() {
        let n = Noise::diagonal(&[0.5, 2.0]).unwrap();
        let r = DVector::from_column_slice(&[1.0, 1.0]);
        let w = n.whiten(&r);
        assert_relative_eq!(w[0], 2.0);
        assert_relative_eq!(w[1], 0.5);
    }

    #[test]
    fn full_covariance_whitening_gives_unit_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let n = Noise::full_covariance(cov.clone()).unwrap();
        // W * cov * W^T should be identity
        let w = match &n.kind {
            Kind::Full { whiten } => whiten.clone(),
            _ => unreachable!(),
        };
        let prod = &w * &cov * w.transpose();
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn log_norm_matches_closed_form() {
        // unit 1D noise: log(1/sqrt(2 pi))
        let n = Noise::isotropic(1, 1.0).unwrap();
        assert_relative_eq!(
            n.log_norm_constant(),
            -(0.5f64) * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
        // diagonal and full forms agree
        let d = Noise::diagonal(&[0.3, 1.7]).unwrap();
        let f = Noise::full_covariance(DMatrix::from_diagonal(&DVector::from_column_slice(&[
            0.09, 2.89,
        ])))
        .unwrap();
        assert_relative_eq!(d.log_norm_constant(), f.log_norm_constant(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Noise::diagonal(&[1.0, -0.5]).is_err());
        assert!(Noise::diagonal(&[f64::NAN]).is_err());
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Noise::full_covariance(not_pd).is_err());
    }
}

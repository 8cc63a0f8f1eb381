//! Symmetric positive semidefinite matrices and the small amount of dense
//! linear algebra the couplings and densities need.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// A symmetric positive semidefinite matrix.
///
/// Symmetry holds to 1e-12 relative and every eigenvalue is at least
/// `-1e-10 * max eigenvalue`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdMatrix(DMatrix<f64>);

impl PsdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::domain("PsdMatrix::new", "matrix must be square and non-empty"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("PsdMatrix::new", "non-finite entry"));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::domain(
                "PsdMatrix::new",
                format!("matrix is not symmetric (max asymmetry {asym:e})"),
            ));
        }
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min < -1e-10 * max.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::domain(
                "PsdMatrix::new",
                format!("matrix has negative eigenvalue {min:e}"),
            ));
        }
        Ok(Self(m))
    }

    /// Wrap a matrix known to be PSD (e.g. `A Aᵀ`), symmetrizing rounding noise.
    pub(crate) fn from_gram(m: DMatrix<f64>) -> Self {
        Self(symmetrize(&m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// log det, or `None` when the matrix is singular.
    pub fn ln_det(&self) -> Option<f64> {
        ln_det_spd(&self.0)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// log det of a symmetric positive definite matrix via Cholesky.
pub fn ln_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Symmetric square root `C` with `C * C = V`, flooring eigenvalues at 1e-12.
pub fn sqrt_spd(v: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigenvalues(v, |l| l.max(1e-12).sqrt())
}

/// Apply `f` to the eigenvalues of a symmetric matrix.
pub fn map_eigenvalues(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(PsdMatrix::new(a).is_err());
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(PsdMatrix::new(b).is_err());
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(PsdMatrix::new(c).is_ok());
    }

    #[test]
    fn sqrt_squares_back() {
        let v = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = sqrt_spd(&v);
        assert!((&c * &c - &v).amax() < 1e-12);
        assert!((&c - c.transpose()).amax() < 1e-14);
    }

    #[test]
    fn ln_det_and_inverse() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((ln_det_spd(&v).unwrap() - 1.75f64.ln()).abs() < 1e-14);
        let inv = inverse_spd(&v).unwrap();
        assert!((&v * inv - DMatrix::identity(2, 2)).amax() < 1e-14);
    }
}

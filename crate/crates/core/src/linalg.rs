//! Thin wrappers over `nalgebra` for the handful of dense operations the oracles need.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major `rows x cols` slice into a matrix.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Solve `a x = b` by LU with partial pivoting.
pub fn solve(a: DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let x = a.lu().solve(b).ok_or(Error::SingularMatrix(context))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularMatrix(context))
    }
}

/// `(A + Aᵀ) / 2`
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of the symmetric part of `a`.
pub fn sym_eigen_range(a: &DMatrix<f64>) -> Result<(f64, f64)> {
    if a.nrows() == 0 || a.nrows() != a.ncols() {
        return Err(Error::EigenFailure("sym_eigen_range: empty or non-square"));
    }
    let eig = sym(a).symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        if !v.is_finite() {
            return Err(Error::EigenFailure("sym_eigen_range"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Moduli of all eigenvalues of a general square matrix, sorted descending.
pub fn eigen_moduli(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or(Error::EigenFailure("eigen_moduli: Schur did not converge"))?;
    let mut moduli: Vec<f64> = schur.complex_eigenvalues().iter().map(|z| libm::hypot(z.re, z.im)).collect();
    if moduli.iter().any(|m| !m.is_finite()) {
        return Err(Error::EigenFailure("eigen_moduli"));
    }
    moduli.sort_by(|x, y| y.total_cmp(x));
    Ok(moduli)
}

pub fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum()
}

//! Small dense linear-algebra helpers shared by the filter, the moment
//! recursions and the detectors.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative scale of the diagonal jitter used when a covariance that must be
/// inverted turns out to be numerically singular.
pub const JITTER_SCALE: f64 = 1e-9;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = symmetrized(m.clone());
    SymmetricEigen::new(s).eigenvalues.min()
}

/// PSD check with a tolerance relative to the matrix scale.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() || !is_finite(m) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let scale = m.amax().max(1e-300);
    is_symmetric(m, 1e-8) && min_eigenvalue(m) >= -tol * scale
}

/// `a ≼ b` in the positive semi-definite order, up to `tol` relative to the
/// scale of `b`.
pub fn psd_leq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let diff = symmetrized(b - a);
    let scale = b.amax().max(a.amax()).max(1e-300);
    min_eigenvalue(&diff) >= -tol * scale
}

pub fn validate_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_finite(m) {
        return Err(Error::NonFinite(name.to_string()));
    }
    if !is_psd(m, 1e-10) {
        return Err(Error::NotPsd(name.to_string()));
    }
    Ok(())
}

pub fn validate_pd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    validate_psd(name, m)?;
    if Cholesky::new(symmetrized(m.clone())).is_none() {
        return Err(Error::Singular(name.to_string()));
    }
    Ok(())
}

/// Square-root factor `F` with `F·F' = m` for a symmetric PSD matrix.
/// Eigen-based so it also works for singular covariances (e.g. `Σ = 0`).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let mut v = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(symmetrized(m.clone())).ok_or_else(|| Error::Singular(name.to_string()))?;
    Ok(symmetrized(chol.inverse()))
}

/// Cholesky factorisation that falls back to a diagonal jitter of
/// `1e-9 · trace/dim` when the matrix is numerically singular. Returns the
/// factorisation and the jitter that was added, if any.
pub fn jittered_cholesky(m: &DMatrix<f64>, name: &str) -> Result<(Cholesky<f64, Dyn>, Option<f64>)> {
    let sym = symmetrized(m.clone());
    if !is_finite(&sym) {
        return Err(Error::NonFinite(name.to_string()));
    }
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok((chol, None));
    }
    let n = sym.nrows().max(1);
    let base = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_SCALE * base;
    for _ in 0..8 {
        let mut shifted = sym.clone();
        for k in 0..sym.nrows() {
            shifted[(k, k)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            log::debug!("{name}: singular covariance regularised with jitter {jitter:.3e}");
            return Ok((chol, Some(jitter)));
        }
        jitter *= 100.0;
    }
    Err(Error::Singular(name.to_string()))
}

pub fn frobenius_rel_err(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let denom = reference.norm();
    let num = (estimate - reference).norm();
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

/// Matrix from nested row-major rows; all rows must have equal length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Spectral radius via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

//! Gaussian conditioning and fast log-density evaluation.
//!
//! A [`ConditionalLaw`] is the data-independent part of `p(x | r)` for a
//! zero-mean jointly Gaussian pair: the regression gain `cov(x,r)·cov(r)⁻¹`
//! and the Schur-complement covariance. Applying it to a realised `r` gives a
//! [`ConditionalGaussian`]. [`CompiledLaw`] is the same object flattened for
//! the inner loops of the detectors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, jittered_cholesky, symmetrized};

/// Largest target dimension supported by [`CompiledLaw`].
pub const MAX_TARGET_DIM: usize = 16;

/// Log of the density floor `1e-300` applied to underflowing likelihoods.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        gaussian_log_pdf(x, &self.mean, &self.cov)
    }
}

/// Dense multivariate normal log-density.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() || cov.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "log_pdf: x {} mean {} cov {}x{}",
            x.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let (chol, _) = jittered_cholesky(cov, "density covariance")?;
    let diff = x - mean;
    let z = chol
        .l_dirty()
        .view((0, 0), (x.len(), x.len()))
        .lower_triangle()
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::Singular("density covariance".into()))?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det + z.norm_squared()))
}

#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    /// `cov(x, r)·cov(r)⁻¹`, `dim(x) × dim(r)`.
    pub gain: DMatrix<f64>,
    /// `cov(x) − cov(x, r)·cov(r)⁻¹·cov(r, x)`.
    pub cov: DMatrix<f64>,
    /// Diagonal jitter added to `cov(r)`, if it was singular.
    pub jitter: Option<f64>,
}

impl ConditionalLaw {
    /// Conditions a zero-mean Gaussian `x` on a zero-mean `r`. An empty
    /// conditioning vector returns the marginal.
    pub fn new(cov_xx: &DMatrix<f64>, cov_xr: &DMatrix<f64>, cov_rr: &DMatrix<f64>) -> Result<Self> {
        let d = cov_xx.nrows();
        let k = cov_rr.nrows();
        if !cov_xx.is_square() || cov_xr.nrows() != d || cov_xr.ncols() != k || !cov_rr.is_square() {
            return Err(Error::Dimension(format!(
                "conditioning blocks {}x{}, {}x{}, {}x{}",
                cov_xx.nrows(),
                cov_xx.ncols(),
                cov_xr.nrows(),
                cov_xr.ncols(),
                cov_rr.nrows(),
                cov_rr.ncols()
            )));
        }
        if !is_finite(cov_xx) || !is_finite(cov_xr) || !is_finite(cov_rr) {
            return Err(Error::NonFinite("conditioning blocks".into()));
        }
        if k == 0 {
            return Ok(Self {
                gain: DMatrix::zeros(d, 0),
                cov: symmetrized(cov_xx.clone()),
                jitter: None,
            });
        }
        let (chol, jitter) = jittered_cholesky(cov_rr, "conditioning covariance")?;
        // gain' = cov(r)⁻¹ · cov(r, x)
        let gain = chol.solve(&cov_xr.transpose()).transpose();
        let cov = symmetrized(cov_xx - &gain * cov_xr.transpose());
        Ok(Self { gain, cov, jitter })
    }

    pub fn cond_dim(&self) -> usize {
        self.gain.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.gain.nrows()
    }

    pub fn condition(&self, r: &DVector<f64>) -> Result<ConditionalGaussian> {
        if r.len() != self.cond_dim() {
            return Err(Error::Dimension(format!(
                "conditioning vector has length {}, expected {}",
                r.len(),
                self.cond_dim()
            )));
        }
        Ok(ConditionalGaussian {
            mean: &self.gain * r,
            cov: self.cov.clone(),
        })
    }

    pub fn compile(&self) -> Result<CompiledLaw> {
        CompiledLaw::new(&self.gain, &self.cov)
    }
}

/// Flattened conditional law: `log N(x; G·r, P)` evaluated as
/// `c − ½‖W(x − G·r)‖²` with `W = chol(P)⁻¹`.
#[derive(Debug, Clone)]
pub struct CompiledLaw {
    dim: usize,
    cond_dim: usize,
    gain: Box<[f64]>,
    whiten: Box<[f64]>,
    log_norm: f64,
}

impl CompiledLaw {
    pub fn new(gain: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        if dim > MAX_TARGET_DIM {
            return Err(Error::Dimension(format!("target dimension {dim} exceeds {MAX_TARGET_DIM}")));
        }
        let (chol, _) = jittered_cholesky(cov, "conditional covariance")?;
        let l = chol.l();
        let whiten_m = l
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or_else(|| Error::Singular("conditional covariance".into()))?;
        let log_det: f64 = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det);
        let cond_dim = gain.ncols();
        let gain_flat: Vec<f64> = (0..dim)
            .flat_map(|i| (0..cond_dim).map(move |j| (i, j)))
            .map(|(i, j)| gain[(i, j)])
            .collect();
        let whiten: Vec<f64> = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| whiten_m[(i, j)])
            .collect();
        Ok(Self {
            dim,
            cond_dim,
            gain: gain_flat.into_boxed_slice(),
            whiten: whiten.into_boxed_slice(),
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Log-density of `target` given the conditioning values `cond`; no
    /// floor is applied here.
    #[inline]
    pub fn log_pdf(&self, target: &[f64], cond: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(target, cond)
    }

    /// `(x − G·r)' P⁻¹ (x − G·r)`.
    #[inline]
    pub fn mahalanobis_sq(&self, target: &[f64], cond: &[f64]) -> f64 {
        debug_assert_eq!(target.len(), self.dim);
        debug_assert_eq!(cond.len(), self.cond_dim);
        let mut resid = [0.0f64; MAX_TARGET_DIM];
        for (i, r) in resid.iter_mut().enumerate().take(self.dim) {
            let row = &self.gain[i * self.cond_dim..(i + 1) * self.cond_dim];
            let pred: f64 = row.iter().zip(cond).map(|(g, c)| g * c).sum();
            *r = target[i] - pred;
        }
        let mut quad = 0.0;
        for i in 0..self.dim {
            let row = &self.whiten[i * self.dim..i * self.dim + i + 1];
            let z: f64 = row.iter().zip(&resid[..=i]).map(|(w, r)| w * r).sum();
            quad += z * z;
        }
        quad
    }
}

/// Applies the density floor, reporting whether it was hit.
#[inline]
pub fn floored(log_density: f64) -> (f64, bool) {
    if log_density.is_nan() || log_density < LOG_DENSITY_FLOOR {
        (LOG_DENSITY_FLOOR, true)
    } else {
        (log_density, false)
    }
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, log_add_exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint() -> DMatrix<f64> {
        // random-looking SPD 4x4
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[0.9, 0.1, 0.3, 0.2, 0.4, 1.1, 0.0, 0.5, 0.2, 0.3, 0.8, 0.1, 0.6, 0.2, 0.4, 1.2],
        );
        &a * a.transpose() + DMatrix::identity(4, 4) * 0.1
    }

    #[test]
    fn uncorrelated_conditioning_returns_marginal() {
        let cov_xx = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let law = ConditionalLaw::new(&cov_xx, &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).unwrap();
        let g = law.condition(&DVector::from_vec(vec![5.0, -3.0])).unwrap();
        assert_eq!(g.mean, DVector::zeros(2));
        assert!((g.cov - cov_xx).norm() < 1e-15);
    }

    #[test]
    fn compiled_matches_dense() {
        let j = joint();
        let law = ConditionalLaw::new(
            &j.view((0, 0), (2, 2)).into_owned(),
            &j.view((0, 2), (2, 2)).into_owned(),
            &j.view((2, 2), (2, 2)).into_owned(),
        )
        .unwrap();
        let r = DVector::from_vec(vec![0.3, -1.2]);
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let dense = law.condition(&r).unwrap().log_pdf(&x).unwrap();
        let fast = law.compile().unwrap().log_pdf(x.as_slice(), r.as_slice());
        assert!((dense - fast).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_standard_normal() {
        let v = gaussian_log_pdf(&DVector::zeros(1), &DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn floor_catches_nan_and_underflow() {
        assert_eq!(floored(f64::NAN), (LOG_DENSITY_FLOOR, true));
        assert_eq!(floored(-1e6), (LOG_DENSITY_FLOOR, true));
        assert_eq!(floored(-3.0), (-3.0, false));
    }

    #[test]
    fn log_sum_exp_handles_empty_and_infinite() {
        assert_eq!(log_sum_exp(Vec::<f64>::new()), f64::NEG_INFINITY);
        assert!((log_sum_exp([0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}

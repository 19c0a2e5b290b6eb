use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Covariance regularization used when a set has fewer samples than
/// `dim + 1`.
pub const FID_EPS: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Sample mean and unbiased covariance; adds `ε·I` when the sample count
    /// cannot give a full-rank covariance.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InsufficientSamples(n));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        if n < d + 1 {
            for i in 0..d {
                cov[(i, i)] += FID_EPS;
            }
        }
        Ok(Self { mean, cov })
    }
}

/// Square root of a symmetric positive semi-definite matrix, with negative
/// eigenvalues clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// The trace of `(Σ₁Σ₂)^{1/2}` is taken from the symmetric product
/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same eigenvalues.
pub fn fid_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.nrows() != d || b.cov.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: b.mean.len() });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let s1 = sqrtm_psd(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    fid_from_moments(&Moments::fit(set_a)?, &Moments::fit(set_b)?)
}

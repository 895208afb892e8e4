//! Explicit cellwise weighted estimators and PSD repair.
//!
//! `cw_mean` weights each column by its own cell weights. `cw_cov` weights
//! each cross-product by a pair weight built from the two cell weights:
//! the minimum (cwCov) or the geometric mean (sqrtCov). Neither covariance is
//! guaranteed to be positive semidefinite, so [`regularize_psd`] is provided
//! to floor the spectrum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{
    check_symmetric, EstimateReport, GaussianParams, Method, WeightedDataset, SYMMETRY_TOL,
};
use crate::error::{Error, Result};

/// Default relative tolerance for [`is_psd`].
pub const DEFAULT_PSD_TOL: f64 = 1e-10;

/// How the weight of a cell pair `(x_ij, x_ik)` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairWeightRule {
    /// `min(w_ij, w_ik)`; gives cwCov.
    Min,
    /// `sqrt(w_ij * w_ik)`; gives sqrtCov.
    Sqrt,
}

impl PairWeightRule {
    #[inline]
    pub fn pair_weight(self, a: f64, b: f64) -> f64 {
        match self {
            PairWeightRule::Min => a.min(b),
            PairWeightRule::Sqrt => (a * b).sqrt(),
        }
    }
}

/// Cellwise weighted mean: `sum_i w_ij x_ij / sum_i w_ij` per column.
pub fn cw_mean(ds: &WeightedDataset) -> Result<DVector<f64>> {
    let x = ds.values();
    let w = ds.weights();
    let mut mu = DVector::zeros(ds.ncols());
    for j in 0..ds.ncols() {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..ds.nrows() {
            num += w[(i, j)] * x[(i, j)];
            den += w[(i, j)];
        }
        if den <= 0.0 {
            return Err(Error::ZeroColumnWeight { column: j });
        }
        mu[j] = num / den;
    }
    Ok(mu)
}

/// Cellwise weighted covariance centered at [`cw_mean`], divisor equal to the
/// total pair weight. Diagonal entries use `w_ij` for both rules.
pub fn cw_cov(ds: &WeightedDataset, rule: PairWeightRule) -> Result<DMatrix<f64>> {
    let mu = cw_mean(ds)?;
    let x = ds.values();
    let w = ds.weights();
    let d = ds.ncols();
    let centered = DMatrix::from_fn(ds.nrows(), d, |i, j| x[(i, j)] - mu[j]);
    let mut sigma = DMatrix::zeros(d, d);
    for j in 0..d {
        for k in j..d {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..ds.nrows() {
                let pw = if j == k {
                    w[(i, j)]
                } else {
                    rule.pair_weight(w[(i, j)], w[(i, k)])
                };
                if pw > 0.0 {
                    num += pw * centered[(i, j)] * centered[(i, k)];
                    den += pw;
                }
            }
            if den <= 0.0 {
                return Err(if j == k {
                    Error::ZeroColumnWeight { column: j }
                } else {
                    Error::ZeroPairWeight {
                        first: j,
                        second: k,
                    }
                });
            }
            sigma[(j, k)] = num / den;
            sigma[(k, j)] = sigma[(j, k)];
        }
    }
    Ok(sigma)
}

fn sorted_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(m.clone())
}

/// True iff the smallest eigenvalue is at least `-tol * max(1, largest)`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> Result<bool> {
    check_symmetric(m, SYMMETRY_TOL)?;
    if m.nrows() == 0 {
        return Ok(true);
    }
    let eig = sorted_eigen(m);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    Ok(min >= -tol * max.max(1.0))
}

/// Floor used by [`regularize_psd`] when the caller has no preference:
/// `1e-6` times the mean diagonal entry.
pub fn default_floor(m: &DMatrix<f64>) -> f64 {
    let mean_diag = m.diagonal().mean();
    if mean_diag > 0.0 && mean_diag.is_finite() {
        1e-6 * mean_diag
    } else {
        1e-6
    }
}

/// Replaces every eigenvalue below `floor` by `floor` and reassembles the
/// matrix. Input whose spectrum is already at or above `floor` is returned
/// unchanged.
pub fn regularize_psd(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    check_symmetric(m, SYMMETRY_TOL)?;
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "PSD floor must be positive, got {floor}"
        )));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = sorted_eigen(m);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(m.clone());
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// cwMean with cwCov or sqrtCov, optionally floored to PSD when the raw
/// covariance is not PSD.
pub fn explicit_estimate(
    ds: &WeightedDataset,
    rule: PairWeightRule,
    regularize: bool,
) -> Result<EstimateReport> {
    let mu = cw_mean(ds)?;
    let raw = cw_cov(ds, rule)?;
    let psd = is_psd(&raw, DEFAULT_PSD_TOL)?;
    let (sigma, regularized) = if regularize && !psd {
        (regularize_psd(&raw, default_floor(&raw))?, true)
    } else {
        (raw, false)
    };
    Ok(EstimateReport {
        method: match rule {
            PairWeightRule::Min => Method::CwMeanCwCov,
            PairWeightRule::Sqrt => Method::CwMeanSqrtCov,
        },
        params: GaussianParams::new(mu, sigma)?,
        iterations: 0,
        converged: true,
        loglik_trace: Vec::new(),
        psd,
        regularized,
        warnings: Vec::new(),
    })
}

//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use cellweight::{
    cw_cov, cw_mean, fit_cwmle, is_psd, regularize_psd, unpack_dataset, EmConfig, EmInit,
    PairWeightRule, WeightedDataset,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

/// EM settings that iterate until the parameters themselves stop moving.
pub fn fixed_point_em(init: EmInit) -> EmConfig {
    EmConfig {
        max_iter: 100_000,
        tol: 1e-14,
        init,
        ridge: 0.0,
        param_tol: Some(1e-13),
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Mean and covariance (divisor n) by explicit loops.
pub fn plain_mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mu[j] += x[(i, j)];
        }
    }
    mu /= n as f64;
    let mut s = DMatrix::zeros(d, d);
    for i in 0..n {
        for j in 0..d {
            for k in 0..d {
                s[(j, k)] += (x[(i, j)] - mu[j]) * (x[(i, k)] - mu[k]);
            }
        }
    }
    (mu, s / n as f64)
}

/// Gaussian log density of `x[idx]` under the marginal of `(mu, sigma)`,
/// through an explicit inverse and determinant.
pub fn marginal_logpdf(x: &[f64], idx: &[usize], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let k = idx.len();
    let s = DMatrix::from_fn(k, k, |a, b| sigma[(idx[a], idx[b])]);
    let z = DVector::from_fn(k, |a, _| x[idx[a]] - mu[idx[a]]);
    let inv = s.clone().try_inverse().expect("invertible block");
    let quad = (z.transpose() * inv * &z)[(0, 0)];
    -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
}

/// Cellwise weighted loglikelihood of one row by the layer-cake sum: for the
/// distinct positive weights `u_1 < ... < u_q` (with `u_0 = 0`), add
/// `(u_k - u_{k-1})` times the marginal loglikelihood of the cells with
/// weight at least `u_k`.
pub fn layered_loglik(x: &[f64], w: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let mut levels: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut prev = 0.0;
    let mut total = 0.0;
    for u in levels {
        let idx: Vec<usize> = (0..w.len()).filter(|&j| w[j] >= u).collect();
        total += (u - prev) * marginal_logpdf(x, &idx, mu, sigma);
        prev = u;
    }
    total
}

/// Textbook EM for Gaussian data with missing cells (`None`), written
/// row by row with explicit inverses. Stops when no parameter moves by
/// more than `tol`.
pub fn incomplete_data_em(
    x: &[Vec<Option<f64>>],
    tol: f64,
    max_iter: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    let mut sigma = DMatrix::identity(d, d);
    for j in 0..d {
        let obs: Vec<f64> = x.iter().filter_map(|r| r[j]).collect();
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        mu[j] = m;
        sigma[(j, j)] = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
    }
    for _ in 0..max_iter {
        let mut s1 = DVector::zeros(d);
        let mut s2 = DMatrix::zeros(d, d);
        for row in x {
            let o: Vec<usize> = (0..d).filter(|&j| row[j].is_some()).collect();
            let m: Vec<usize> = (0..d).filter(|&j| row[j].is_none()).collect();
            let mut xhat = DVector::from_fn(d, |j, _| row[j].unwrap_or(0.0));
            let mut c = DMatrix::zeros(d, d);
            if !m.is_empty() {
                let soo = DMatrix::from_fn(o.len(), o.len(), |a, b| sigma[(o[a], o[b])]);
                let smo = DMatrix::from_fn(m.len(), o.len(), |a, b| sigma[(m[a], o[b])]);
                let smm = DMatrix::from_fn(m.len(), m.len(), |a, b| sigma[(m[a], m[b])]);
                let inv = soo.try_inverse().expect("invertible observed block");
                let dev = DVector::from_fn(o.len(), |a, _| row[o[a]].unwrap() - mu[o[a]]);
                let cond_mean = &smo * &inv * dev;
                let cond_cov = &smm - &smo * &inv * smo.transpose();
                for (a, &ja) in m.iter().enumerate() {
                    xhat[ja] = mu[ja] + cond_mean[a];
                    for (b, &jb) in m.iter().enumerate() {
                        c[(ja, jb)] = cond_cov[(a, b)];
                    }
                }
            }
            s1 += &xhat;
            s2 += &xhat * xhat.transpose() + c;
        }
        let new_mu = &s1 / n;
        let new_sigma = &s2 / n - &new_mu * new_mu.transpose();
        let delta = (&new_mu - &mu).amax().max((&new_sigma - &sigma).amax());
        mu = new_mu;
        sigma = new_sigma;
        if delta < tol {
            break;
        }
    }
    (mu, sigma)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix: returns
/// eigenvalues and eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// Eigenvalue clipping through the Jacobi oracle.
pub fn jacobi_clip(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(m);
    let clipped = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&l| l.max(floor)),
    ));
    &vecs * clipped * vecs.transpose()
}

/// Small weighted datasets: values in [-5, 5], weights in [0, 2] with
/// about a quarter of the cells at exactly zero or sharing a tied value.
pub fn dataset_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = WeightedDataset> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        let cells = n * d;
        (
            proptest::collection::vec(-5.0..5.0f64, cells),
            proptest::collection::vec(
                prop_oneof![
                    6 => 0.01..2.0f64,
                    1 => Just(0.0),
                    1 => Just(0.5),
                ],
                cells,
            ),
        )
            .prop_filter_map("needs a positive weight", move |(x, w)| {
                WeightedDataset::new(
                    DMatrix::from_row_slice(n, d, &x),
                    DMatrix::from_row_slice(n, d, &w),
                )
                .ok()
            })
    })
}

/// Datasets on which EM is well posed: every cell weight positive and
/// enough rows for a nonsingular covariance.
pub fn em_dataset_strategy() -> impl Strategy<Value = WeightedDataset> {
    (1usize..=3).prop_flat_map(|d| {
        let n = 4 * d + 4;
        (
            proptest::collection::vec(-3.0..3.0f64, n * d),
            proptest::collection::vec(prop_oneof![4 => 0.05..1.0f64, 1 => Just(1.0)], n * d),
        )
            .prop_map(move |(x, w)| {
                WeightedDataset::new(
                    DMatrix::from_row_slice(n, d, &x),
                    DMatrix::from_row_slice(n, d, &w),
                )
                .unwrap()
            })
    })
}

pub fn symmetric_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=5).prop_flat_map(|d| {
        proptest::collection::vec(-3.0..3.0f64, d * d).prop_map(move |v| {
            let a = DMatrix::from_row_slice(d, d, &v);
            (&a + a.transpose()) * 0.5
        })
    })
}

pub fn check_em_monotone(ds: &WeightedDataset) -> Result<(), TestCaseError> {
    let cfg = EmConfig {
        max_iter: 200,
        tol: 1e-12,
        init: EmInit::MeanIdentity,
        ridge: 0.0,
        param_tol: None,
    };
    let report = fit_cwmle(ds, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for pair in report.loglik_trace.windows(2) {
        let slack = 1e-9 * (1.0 + pair[0].abs());
        prop_assert!(
            pair[1] >= pair[0] - slack,
            "loglik decreased from {} to {}",
            pair[0],
            pair[1]
        );
    }
    Ok(())
}

pub fn check_scale_invariance(ds: &WeightedDataset, factor: f64) -> Result<(), TestCaseError> {
    let scaled = ds.scale_weights(factor).unwrap();
    match (cw_mean(ds), cw_mean(&scaled)) {
        (Ok(m0), Ok(m1)) => prop_assert!((&m0 - &m1).amax() <= 1e-10 * (1.0 + m0.amax())),
        (Err(_), Err(_)) => {}
        (a, b) => prop_assert!(
            false,
            "scaling changed success: {:?} vs {:?}",
            a.is_ok(),
            b.is_ok()
        ),
    }
    for rule in [PairWeightRule::Min, PairWeightRule::Sqrt] {
        match (cw_cov(ds, rule), cw_cov(&scaled, rule)) {
            (Ok(a), Ok(b)) => prop_assert!(max_abs_diff(&a, &b) <= 1e-10 * (1.0 + a.amax())),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(
                false,
                "scaling changed success: {:?} vs {:?}",
                a.is_ok(),
                b.is_ok()
            ),
        }
    }
    Ok(())
}

pub fn check_regularize(m: &DMatrix<f64>, floor: f64) -> Result<(), TestCaseError> {
    let r = regularize_psd(m, floor).unwrap();
    prop_assert!(is_psd(&r, 1e-10).unwrap());
    prop_assert_eq!(&r, &r.transpose());
    let rr = regularize_psd(&r, floor).unwrap();
    prop_assert!(max_abs_diff(&r, &rr) <= 1e-10 * (1.0 + r.amax()));
    Ok(())
}

pub fn check_unpack_conservation(ds: &WeightedDataset) -> Result<(), TestCaseError> {
    let u = unpack_dataset(ds).unwrap();
    let (n, d) = (ds.nrows(), ds.ncols());
    let mut cell_weight = DMatrix::<f64>::zeros(n, d);
    for r in u.rows() {
        for (j, v) in r.values.iter().enumerate() {
            if let Some(v) = v {
                prop_assert_eq!(*v, ds.values()[(r.source_index, j)]);
                cell_weight[(r.source_index, j)] += r.row_weight;
            }
        }
    }
    for i in 0..n {
        for j in 0..d {
            let w = ds.weights()[(i, j)];
            prop_assert!((cell_weight[(i, j)] - w).abs() <= 1e-12 * (1.0 + w));
        }
    }
    for pair in u.rows().windows(2) {
        if pair[0].source_index == pair[1].source_index {
            let a = pair[0].observed();
            let b = pair[1].observed();
            prop_assert!(
                a.len() < b.len() && a.iter().all(|j| b.contains(j)),
                "not nested: {a:?} {b:?}"
            );
        }
    }
    Ok(())
}

//! Cellwise weighted maximum likelihood for the Gaussian model.
//!
//! The dataset is unpacked and the rowwise weighted observed-data likelihood
//! of the result is maximized by EM. Rows are grouped by their observed
//! column set: the E-step is linear in the observed values, so each group is
//! summarized once by its total weight, weighted mean and weighted scatter,
//! and every iteration afterwards costs one factorization per group.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{
    EstimateReport, GaussianParams, IncompleteRow, Method, UnpackedDataset, WeightedDataset,
};
use crate::error::{Error, Result};
use crate::estimators::{
    cw_cov, cw_mean, default_floor, is_psd, regularize_psd, PairWeightRule, DEFAULT_PSD_TOL,
};
use crate::unpack::unpack_dataset;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Starting point of the EM iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmInit {
    /// cwMean and cwCov, floored to PSD when needed.
    CwCovWarmStart,
    /// cwMean and the identity scaled by the mean cwCov diagonal.
    MeanIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `|l_t - l_{t-1}| / (1 + |l_t|)` drops below this.
    pub tol: f64,
    pub init: EmInit,
    /// Ridge added to the diagonal of observed blocks, relative to the mean
    /// diagonal of the current covariance.
    pub ridge: f64,
    /// When set, convergence also needs the largest parameter change,
    /// relative to `1 + max |theta|`, to drop below this.
    pub param_tol: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            init: EmInit::CwCovWarmStart,
            ridge: 1e-10,
            param_tol: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if let Some(p) = self.param_tol {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "param_tol must be positive, got {p}"
                )));
            }
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Weighted EM sufficient statistics of completed rows.
///
/// `t1` and `t2` are accumulated on `x_hat - origin`; shifting by a fixed
/// origin near the data keeps `t2 / t0 - m m^T` free of cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub origin: DVector<f64>,
    pub t0: f64,
    pub t1: DVector<f64>,
    pub t2: DMatrix<f64>,
}

impl SufficientStats {
    pub fn new(origin: DVector<f64>) -> Self {
        let d = origin.len();
        Self {
            origin,
            t0: 0.0,
            t1: DVector::zeros(d),
            t2: DMatrix::zeros(d, d),
        }
    }

    /// Adds one completed row with weight `v` and conditional covariance `cond`.
    pub fn add_row(&mut self, v: f64, completed: &DVector<f64>, cond: &DMatrix<f64>) {
        let c = completed - &self.origin;
        self.t0 += v;
        self.t1.axpy(v, &c, 1.0);
        self.t2 += (&c * c.transpose() + cond) * v;
    }

    /// Rowwise weighted mean and covariance (divisor `t0`).
    pub fn m_step(&self) -> (DVector<f64>, DMatrix<f64>) {
        let shift = &self.t1 / self.t0;
        let mu = &self.origin + &shift;
        let mut sigma = &self.t2 / self.t0 - &shift * shift.transpose();
        symmetrize(&mut sigma);
        (mu, sigma)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn complement(d: usize, observed: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; d];
    for &j in observed {
        mask[j] = true;
    }
    (0..d).filter(|&j| !mask[j]).collect()
}

fn mean_diag(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        0.0
    } else {
        m.diagonal().mean()
    }
}

/// Cholesky of `block + ridge * I`; `ridge` may be zero.
fn factor_block(block: &DMatrix<f64>, ridge: f64, pattern: &[usize]) -> Result<Cholesky<f64, Dyn>> {
    let mut b = block.clone();
    for i in 0..b.nrows() {
        b[(i, i)] += ridge;
    }
    Cholesky::new(b).ok_or_else(|| Error::SingularBlock {
        pattern: pattern.to_vec(),
    })
}

/// Factorizes an observed block exactly, falling back to a tiny ridge.
fn factor_block_for_loglik(sigma: &DMatrix<f64>, observed: &[usize]) -> Result<Cholesky<f64, Dyn>> {
    let block = sub_matrix(sigma, observed, observed);
    factor_block(&block, 0.0, observed).or_else(|err| {
        let scale = mean_diag(&block);
        if scale > 0.0 {
            factor_block(&block, 1e-10 * scale, observed)
        } else {
            Err(err)
        }
    })
}

struct Conditional {
    /// `Sigma_MO Sigma_OO^{-1}`.
    coef: DMatrix<f64>,
    /// `Sigma_MM - Sigma_MO Sigma_OO^{-1} Sigma_OM`.
    cov: DMatrix<f64>,
}

fn conditional(
    sigma: &DMatrix<f64>,
    observed: &[usize],
    missing: &[usize],
    ridge: f64,
) -> Result<Conditional> {
    let s_oo = sub_matrix(sigma, observed, observed);
    let s_om = sub_matrix(sigma, observed, missing);
    let s_mm = sub_matrix(sigma, missing, missing);
    let chol = factor_block(&s_oo, ridge, observed)?;
    let coef = chol.solve(&s_om).transpose();
    let mut cov = s_mm - &coef * &s_om;
    symmetrize(&mut cov);
    Ok(Conditional { coef, cov })
}

/// Conditional expectation of a row given its observed entries, and the
/// conditional covariance embedded in a `d x d` matrix (zero outside the
/// missing-by-missing block).
pub fn e_step_row(
    row: &IncompleteRow,
    theta: &GaussianParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    e_step_row_ridged(row, theta, 0.0)
}

fn e_step_row_ridged(
    row: &IncompleteRow,
    theta: &GaussianParams,
    ridge: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = theta.dim();
    if row.values.len() != d {
        return Err(Error::Dimension(format!(
            "row has {} entries, model has {d}",
            row.values.len()
        )));
    }
    let observed = row.observed();
    let missing = complement(d, &observed);
    let mut completed = DVector::from_iterator(d, row.values.iter().map(|v| v.unwrap_or(0.0)));
    let mut cond = DMatrix::zeros(d, d);
    if missing.is_empty() {
        return Ok((completed, cond));
    }
    let c = conditional(&theta.sigma, &observed, &missing, ridge)?;
    let resid = sub_vector(&completed, &observed) - sub_vector(&theta.mu, &observed);
    let fill = sub_vector(&theta.mu, &missing) + &c.coef * resid;
    for (a, &j) in missing.iter().enumerate() {
        completed[j] = fill[a];
        for (b, &k) in missing.iter().enumerate() {
            cond[(j, k)] = c.cov[(a, b)];
        }
    }
    Ok((completed, cond))
}

/// Rows sharing one observed-column set, reduced to weighted moments.
#[derive(Debug, Clone)]
struct PatternGroup {
    observed: Vec<usize>,
    missing: Vec<usize>,
    weight: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

fn group_patterns(u: &UnpackedDataset) -> Vec<PatternGroup> {
    let d = u.ncols();
    let mut groups: BTreeMap<Vec<usize>, Vec<&IncompleteRow>> = BTreeMap::new();
    for row in u.rows() {
        groups.entry(row.observed()).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(observed, rows)| {
            let k = observed.len();
            let obs_vec = |r: &IncompleteRow| {
                DVector::from_iterator(k, observed.iter().map(|&j| r.values[j].expect("observed")))
            };
            let weight: f64 = rows.iter().map(|r| r.row_weight).sum();
            let mut mean = DVector::zeros(k);
            for r in &rows {
                mean.axpy(r.row_weight, &obs_vec(r), 1.0);
            }
            mean /= weight;
            let mut scatter = DMatrix::zeros(k, k);
            for r in &rows {
                let c = obs_vec(r) - &mean;
                scatter += &c * c.transpose() * r.row_weight;
            }
            symmetrize(&mut scatter);
            let missing = complement(d, &observed);
            PatternGroup {
                observed,
                missing,
                weight,
                mean,
                scatter,
            }
        })
        .collect()
}

fn groups_loglik(groups: &[PatternGroup], theta: &GaussianParams) -> Result<f64> {
    let mut total = 0.0;
    for g in groups {
        let chol = factor_block_for_loglik(&theta.sigma, &g.observed)?;
        let log_det = chol.ln_determinant();
        let delta = &g.mean - sub_vector(&theta.mu, &g.observed);
        let quad_scatter = chol.solve(&g.scatter).trace();
        let quad_mean = delta.dot(&chol.solve(&delta));
        let k = g.observed.len() as f64;
        total -= 0.5 * (g.weight * (k * LN_2PI + log_det) + quad_scatter + g.weight * quad_mean);
    }
    Ok(total)
}

fn groups_e_step(
    groups: &[PatternGroup],
    theta: &GaussianParams,
    ridge: f64,
    origin: &DVector<f64>,
) -> Result<SufficientStats> {
    let d = theta.dim();
    let mut stats = SufficientStats::new(origin.clone());
    for g in groups {
        // Completion is affine in the observed values: x_hat = lift * x_O + offset.
        let mut lift = DMatrix::zeros(d, g.observed.len());
        for (a, &j) in g.observed.iter().enumerate() {
            lift[(j, a)] = 1.0;
        }
        let mut completed_mean = DVector::zeros(d);
        for (a, &j) in g.observed.iter().enumerate() {
            completed_mean[j] = g.mean[a];
        }
        let mut cond = DMatrix::zeros(d, d);
        if !g.missing.is_empty() {
            let c = conditional(&theta.sigma, &g.observed, &g.missing, ridge)?;
            let resid = &g.mean - sub_vector(&theta.mu, &g.observed);
            let fill = sub_vector(&theta.mu, &g.missing) + &c.coef * resid;
            for (a, &j) in g.missing.iter().enumerate() {
                completed_mean[j] = fill[a];
                for b in 0..g.observed.len() {
                    lift[(j, b)] = c.coef[(a, b)];
                }
                for (b, &k) in g.missing.iter().enumerate() {
                    cond[(j, k)] = c.cov[(a, b)];
                }
            }
        }
        stats.add_row(g.weight, &completed_mean, &cond);
        stats.t2 += &lift * &g.scatter * lift.transpose();
    }
    symmetrize(&mut stats.t2);
    Ok(stats)
}

/// Cellwise weighted loglikelihood of `theta`, evaluated on an unpacked
/// dataset as the row-weighted sum of marginal Gaussian log-densities of the
/// observed coordinates.
pub fn observed_loglik(u: &UnpackedDataset, theta: &GaussianParams) -> Result<f64> {
    if theta.dim() != u.ncols() {
        return Err(Error::Dimension(format!(
            "model has dimension {}, data has {} columns",
            theta.dim(),
            u.ncols()
        )));
    }
    groups_loglik(&group_patterns(u), theta)
}

/// Result of running EM from a given start.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: GaussianParams,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub ridge_applied: bool,
    pub warnings: Vec<String>,
}

/// Runs rowwise weighted EM on an unpacked dataset from `start`.
pub fn run_em(u: &UnpackedDataset, start: GaussianParams, cfg: &EmConfig) -> Result<EmOutcome> {
    cfg.validate()?;
    if start.dim() != u.ncols() {
        return Err(Error::Dimension("start has the wrong dimension".into()));
    }
    if u.is_empty() {
        return Err(Error::NoInformation);
    }
    let groups = group_patterns(u);
    let origin = {
        let mut o = start.mu.clone();
        // Centre on the observed weighted means where available.
        let mut num = DVector::<f64>::zeros(u.ncols());
        let mut den = DVector::<f64>::zeros(u.ncols());
        for g in &groups {
            for (a, &j) in g.observed.iter().enumerate() {
                num[j] += g.weight * g.mean[a];
                den[j] += g.weight;
            }
        }
        for j in 0..u.ncols() {
            if den[j] > 0.0 {
                o[j] = num[j] / den[j];
            }
        }
        o
    };

    let mut theta = start;
    let mut warnings = Vec::new();
    let mut ridge_applied = false;
    let mut prev = groups_loglik(&groups, &theta)?;
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let ridge = cfg.ridge * mean_diag(&theta.sigma).abs();
        let stats = groups_e_step(&groups, &theta, ridge, &origin)?;
        let (mu, mut sigma) = stats.m_step();
        if Cholesky::new(sigma.clone()).is_none() {
            let bump = cfg.ridge.max(1e-10) * mean_diag(&sigma).abs().max(f64::MIN_POSITIVE);
            for i in 0..sigma.nrows() {
                sigma[(i, i)] += bump;
            }
            if !ridge_applied {
                warnings.push(format!(
                    "singular covariance at iteration {iterations}; ridge {bump:e} added"
                ));
            }
            ridge_applied = true;
        }
        let step = (&mu - &theta.mu).amax().max((&sigma - &theta.sigma).amax())
            / (1.0 + mu.amax().max(sigma.amax()));
        theta = GaussianParams { mu, sigma };
        let ll = groups_loglik(&groups, &theta)?;
        trace.push(ll);
        let change = (ll - prev).abs() / (1.0 + ll.abs());
        prev = ll;
        if change < cfg.tol && cfg.param_tol.is_none_or(|p| step < p) {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "EM did not converge in {} iterations",
            cfg.max_iter
        ));
    }
    Ok(EmOutcome {
        params: theta,
        iterations,
        converged,
        loglik_trace: trace,
        ridge_applied,
        warnings,
    })
}

/// Per-column cellwise weighted variances (the diagonal of cwCov), which
/// exist whenever every column has positive total weight.
fn cw_variances(ds: &WeightedDataset, mu: &DVector<f64>) -> DVector<f64> {
    let x = ds.values();
    let w = ds.weights();
    DVector::from_fn(ds.ncols(), |j, _| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..ds.nrows() {
            num += w[(i, j)] * (x[(i, j)] - mu[j]).powi(2);
            den += w[(i, j)];
        }
        num / den
    })
}

fn identity_start(ds: &WeightedDataset, mu: DVector<f64>) -> GaussianParams {
    let scale = cw_variances(ds, &mu).mean();
    let scale = if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        1.0
    };
    let d = mu.len();
    GaussianParams {
        mu,
        sigma: DMatrix::identity(d, d) * scale,
    }
}

/// Starting parameters for EM according to `init`. Returns any warning
/// produced when the warm start is unavailable.
pub fn initial_params(
    ds: &WeightedDataset,
    init: EmInit,
) -> Result<(GaussianParams, Option<String>)> {
    let mu = cw_mean(ds)?;
    match init {
        EmInit::MeanIdentity => Ok((identity_start(ds, mu), None)),
        EmInit::CwCovWarmStart => match cw_cov(ds, PairWeightRule::Min) {
            Ok(cov) => {
                let sigma = regularize_psd(&cov, default_floor(&cov))?;
                Ok((GaussianParams::new(mu, sigma)?, None))
            }
            Err(e @ Error::ZeroPairWeight { .. }) => Ok((
                identity_start(ds, mu),
                Some(format!(
                    "warm start unavailable ({e}); started from scaled identity"
                )),
            )),
            Err(e) => Err(e),
        },
    }
}

fn report_from(
    outcome: EmOutcome,
    method: Method,
    mut warnings: Vec<String>,
) -> Result<EstimateReport> {
    let psd = is_psd(&outcome.params.sigma, DEFAULT_PSD_TOL)?;
    warnings.extend(outcome.warnings);
    Ok(EstimateReport {
        method,
        params: outcome.params,
        iterations: outcome.iterations,
        converged: outcome.converged,
        loglik_trace: outcome.loglik_trace,
        psd,
        regularized: outcome.ridge_applied,
        warnings,
    })
}

/// Cellwise weighted MLE: unpack, then EM on the row-weighted result.
pub fn fit_cwmle(ds: &WeightedDataset, cfg: &EmConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let u = unpack_dataset(ds)?;
    let (start, warning) = initial_params(ds, cfg.init)?;
    let outcome = run_em(&u, start, cfg)?;
    report_from(outcome, Method::CwMle, warning.into_iter().collect())
}

/// Gaussian MLE that ignores the weight values: every positive weight counts
/// as one and zero weights stay missing. Complete data uses the closed form.
pub fn fit_unweighted(ds: &WeightedDataset, cfg: &EmConfig) -> Result<EstimateReport> {
    let complete = ds.weights().iter().all(|&w| w > 0.0);
    if !complete {
        let report = fit_cwmle(&ds.indicator_weights(), cfg)?;
        return Ok(EstimateReport {
            method: Method::UnweightedMle,
            ..report
        });
    }
    let (mu, sigma) = sample_mean_cov(ds.values());
    let theta = GaussianParams::new(mu, sigma)?;
    let u = unpack_dataset(&ds.indicator_weights())?;
    let ll = observed_loglik(&u, &theta).ok();
    Ok(EstimateReport {
        method: Method::UnweightedMle,
        psd: is_psd(&theta.sigma, DEFAULT_PSD_TOL)?,
        params: theta,
        iterations: 0,
        converged: true,
        loglik_trace: ll.into_iter().collect(),
        regularized: false,
        warnings: Vec::new(),
    })
}

/// Column means and covariance with divisor `n`.
pub fn sample_mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let mut centered = x.clone();
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            centered[(i, j)] -= mu[j];
        }
    }
    let mut sigma = centered.transpose() * &centered / n;
    symmetrize(&mut sigma);
    (mu, sigma)
}

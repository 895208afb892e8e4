use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{generate_scenario, ScenarioConfig};
use crate::cwmle::{fit_cwmle, fit_unweighted};
use crate::error::{Error, Result};
use crate::estimators::{cw_cov, cw_mean, is_psd, PairWeightRule, DEFAULT_PSD_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Estimator {
    #[serde(rename = "unweighted")]
    Unweighted,
    #[serde(rename = "cwMLE")]
    CwMle,
    #[serde(rename = "cwMean+cwCov")]
    CwMeanCwCov,
    #[serde(rename = "cwMean+sqrtCov")]
    CwMeanSqrtCov,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Unweighted,
        Estimator::CwMle,
        Estimator::CwMeanCwCov,
        Estimator::CwMeanSqrtCov,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Unweighted => "unweighted",
            Estimator::CwMle => "cwMLE",
            Estimator::CwMeanCwCov => "cwMean+cwCov",
            Estimator::CwMeanSqrtCov => "cwMean+sqrtCov",
        }
    }
}

/// Block of parameter components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mean,
    Diagonal,
    OffDiagonal,
}

impl Component {
    fn extract(self, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Vec<f64> {
        let d = mu.len();
        match self {
            Component::Mean => mu.iter().copied().collect(),
            Component::Diagonal => sigma.diagonal().iter().copied().collect(),
            Component::OffDiagonal => (0..d)
                .flat_map(|j| ((j + 1)..d).map(move |k| (j, k)))
                .map(|(j, k)| sigma[(j, k)])
                .collect(),
        }
    }

    /// Asymptotic variance of the unweighted estimator of one component when
    /// the truth is the identity covariance.
    fn reference_variance(self) -> f64 {
        match self {
            Component::Diagonal => 2.0,
            Component::Mean | Component::OffDiagonal => 1.0,
        }
    }

    fn truth(self) -> f64 {
        match self {
            Component::Diagonal => 1.0,
            Component::Mean | Component::OffDiagonal => 0.0,
        }
    }
}

/// Estimates from one estimator in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Everything computed in one replication.
#[derive(Debug, Clone)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub results: Vec<(Estimator, std::result::Result<Estimate, String>)>,
    /// PSD status of the raw cwCov and sqrtCov matrices, when computed.
    pub cwcov_psd: Option<bool>,
    pub sqrtcov_psd: Option<bool>,
}

impl ReplicationRecord {
    pub fn get(&self, e: Estimator) -> Option<&Estimate> {
        self.results
            .iter()
            .find(|(est, _)| *est == e)
            .and_then(|(_, r)| r.as_ref().ok())
    }
}

fn explicit(ds: &crate::data::WeightedDataset, rule: PairWeightRule) -> Result<(Estimate, bool)> {
    let mu = cw_mean(ds)?;
    let sigma = cw_cov(ds, rule)?;
    let psd = is_psd(&sigma, DEFAULT_PSD_TOL)?;
    Ok((
        Estimate {
            mu,
            sigma,
            iterations: 0,
            converged: true,
        },
        psd,
    ))
}

fn run_replication(
    cfg: &ScenarioConfig,
    replication: usize,
    estimators: &[Estimator],
) -> ReplicationRecord {
    let mut record = ReplicationRecord {
        replication,
        results: Vec::with_capacity(estimators.len()),
        cwcov_psd: None,
        sqrtcov_psd: None,
    };
    // A draw can be degenerate (e.g. every MCAR weight zero); that counts
    // as a failure of every estimator in this replication.
    let ds = match generate_scenario(cfg, replication) {
        Ok(ds) => ds,
        Err(err) => {
            let msg = err.to_string();
            record.results = estimators.iter().map(|&e| (e, Err(msg.clone()))).collect();
            return record;
        }
    };
    for &e in estimators {
        let outcome = match e {
            Estimator::Unweighted | Estimator::CwMle => {
                let fit = if e == Estimator::CwMle {
                    fit_cwmle(&ds, &cfg.em)
                } else {
                    fit_unweighted(&ds, &cfg.em)
                };
                fit.map(|r| Estimate {
                    mu: r.params.mu,
                    sigma: r.params.sigma,
                    iterations: r.iterations,
                    converged: r.converged,
                })
            }
            Estimator::CwMeanCwCov => explicit(&ds, PairWeightRule::Min).map(|(est, psd)| {
                record.cwcov_psd = Some(psd);
                est
            }),
            Estimator::CwMeanSqrtCov => explicit(&ds, PairWeightRule::Sqrt).map(|(est, psd)| {
                record.sqrtcov_psd = Some(psd);
                est
            }),
        };
        record
            .results
            .push((e, outcome.map_err(|err| err.to_string())));
    }
    record
}

fn normalize_estimators(estimators: &[Estimator]) -> Result<Vec<Estimator>> {
    let mut set: Vec<Estimator> = estimators.to_vec();
    set.sort();
    set.dedup();
    if set.is_empty() {
        return Err(Error::InvalidConfig("no estimators requested".into()));
    }
    Ok(set)
}

/// Runs every replication (in parallel) and returns the raw records in
/// replication order.
pub fn run_replications(
    cfg: &ScenarioConfig,
    estimators: &[Estimator],
) -> Result<Vec<ReplicationRecord>> {
    cfg.validate()?;
    let estimators = normalize_estimators(estimators)?;
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|m| run_replication(cfg, m, &estimators))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentStats {
    /// Mean estimate, averaged over the components of the block.
    pub average: f64,
    /// `n` times the variance across replications.
    pub n_variance: f64,
    /// `n` times the mean squared error against the true value.
    pub n_mse: f64,
    /// `n_variance` divided by the unweighted asymptotic variance.
    pub variance_factor: f64,
    /// `n_mse` divided by the unweighted asymptotic variance.
    pub mse_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub not_converged: usize,
    pub mean: Option<ComponentStats>,
    pub diagonal: Option<ComponentStats>,
    pub off_diagonal: Option<ComponentStats>,
}

/// Scaled squared distance between cwMLE and its explicit approximations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceStats {
    pub mean_cwmean: Option<f64>,
    pub diagonal_cwcov: Option<f64>,
    pub off_diagonal_cwcov: Option<f64>,
    pub off_diagonal_sqrtcov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub config: ScenarioConfig,
    pub estimators: Vec<EstimatorSummary>,
    pub equivalence: EquivalenceStats,
    pub psd_fraction_cwcov: Option<f64>,
    pub psd_fraction_sqrtcov: Option<f64>,
}

impl SimulationSummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialization cannot fail")
    }
}

fn component_stats(n: usize, component: Component, draws: &[Vec<f64>]) -> Option<ComponentStats> {
    let m = draws.len();
    let k = draws.first().map_or(0, Vec::len);
    if m == 0 || k == 0 {
        return None;
    }
    let truth = component.truth();
    let (mut avg, mut var, mut mse) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let mean_c = draws.iter().map(|v| v[c]).sum::<f64>() / m as f64;
        avg += mean_c;
        var += draws.iter().map(|v| (v[c] - mean_c).powi(2)).sum::<f64>() / m as f64;
        mse += draws.iter().map(|v| (v[c] - truth).powi(2)).sum::<f64>() / m as f64;
    }
    let nf = n as f64;
    let kf = k as f64;
    let reference = component.reference_variance();
    Some(ComponentStats {
        average: avg / kf,
        n_variance: nf * var / kf,
        n_mse: nf * mse / kf,
        variance_factor: nf * var / kf / reference,
        mse_factor: nf * mse / kf / reference,
    })
}

/// `n / (M K) * sum_m sum_j (left_j - right_j)^2` over replications where
/// both estimators succeeded, with `K` components in the block.
pub fn equivalence_statistic(
    n: usize,
    records: &[ReplicationRecord],
    component: Component,
    left: Estimator,
    right: Estimator,
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut k = 0usize;
    for r in records {
        if let (Some(a), Some(b)) = (r.get(left), r.get(right)) {
            let va = component.extract(&a.mu, &a.sigma);
            let vb = component.extract(&b.mu, &b.sigma);
            k = va.len();
            total += va
                .iter()
                .zip(&vb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
            count += 1;
        }
    }
    if count == 0 || k == 0 {
        return None;
    }
    Some(n as f64 * total / (count * k) as f64)
}

/// Aggregates replication records in replication order.
pub fn summarize(cfg: &ScenarioConfig, records: &[ReplicationRecord]) -> SimulationSummary {
    let mut estimators: Vec<Estimator> = records
        .first()
        .map(|r| r.results.iter().map(|(e, _)| *e).collect())
        .unwrap_or_default();
    estimators.sort();

    let summaries = estimators
        .iter()
        .map(|&e| {
            let ok: Vec<&Estimate> = records.iter().filter_map(|r| r.get(e)).collect();
            let block = |c: Component| {
                let draws: Vec<Vec<f64>> = ok
                    .iter()
                    .map(|est| c.extract(&est.mu, &est.sigma))
                    .collect();
                component_stats(cfg.n, c, &draws)
            };
            EstimatorSummary {
                estimator: e,
                successes: ok.len(),
                failures: records.len() - ok.len(),
                not_converged: ok.iter().filter(|est| !est.converged).count(),
                mean: block(Component::Mean),
                diagonal: block(Component::Diagonal),
                off_diagonal: block(Component::OffDiagonal),
            }
        })
        .collect();

    let eq = |c, right| equivalence_statistic(cfg.n, records, c, Estimator::CwMle, right);
    let fraction = |flags: Vec<bool>| {
        (!flags.is_empty())
            .then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    };
    SimulationSummary {
        config: *cfg,
        estimators: summaries,
        equivalence: EquivalenceStats {
            mean_cwmean: eq(Component::Mean, Estimator::CwMeanCwCov),
            diagonal_cwcov: eq(Component::Diagonal, Estimator::CwMeanCwCov),
            off_diagonal_cwcov: eq(Component::OffDiagonal, Estimator::CwMeanCwCov),
            off_diagonal_sqrtcov: eq(Component::OffDiagonal, Estimator::CwMeanSqrtCov),
        },
        psd_fraction_cwcov: fraction(records.iter().filter_map(|r| r.cwcov_psd).collect()),
        psd_fraction_sqrtcov: fraction(records.iter().filter_map(|r| r.sqrtcov_psd).collect()),
    }
}

/// Runs the scenario and aggregates the per-estimator metrics.
pub fn run_simulation(cfg: &ScenarioConfig, estimators: &[Estimator]) -> Result<SimulationSummary> {
    let records = run_replications(cfg, estimators)?;
    Ok(summarize(cfg, &records))
}

/// Which estimator pair and block an equivalence curve tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Comparison {
    pub component: Component,
    pub left: Estimator,
    pub right: Estimator,
}

impl Comparison {
    pub const MEAN_CWMEAN: Comparison = Comparison {
        component: Component::Mean,
        left: Estimator::CwMle,
        right: Estimator::CwMeanCwCov,
    };
    pub const DIAGONAL_CWCOV: Comparison = Comparison {
        component: Component::Diagonal,
        left: Estimator::CwMle,
        right: Estimator::CwMeanCwCov,
    };
    pub const OFF_DIAGONAL_CWCOV: Comparison = Comparison {
        component: Component::OffDiagonal,
        left: Estimator::CwMle,
        right: Estimator::CwMeanCwCov,
    };
    pub const OFF_DIAGONAL_SQRTCOV: Comparison = Comparison {
        component: Component::OffDiagonal,
        left: Estimator::CwMle,
        right: Estimator::CwMeanSqrtCov,
    };

    pub const STANDARD: [Comparison; 4] = [
        Self::MEAN_CWMEAN,
        Self::DIAGONAL_CWCOV,
        Self::OFF_DIAGONAL_CWCOV,
        Self::OFF_DIAGONAL_SQRTCOV,
    ];

    pub fn label(&self) -> String {
        let block = match self.component {
            Component::Mean => "mean",
            Component::Diagonal => "diag",
            Component::OffDiagonal => "offdiag",
        };
        format!("{block}:{}~{}", self.left.label(), self.right.label())
    }
}

/// One point of an equivalence curve: sample size and one statistic per
/// requested comparison (`None` when no replication produced both sides).
pub type CurvePoint = (usize, Vec<Option<f64>>);

/// Equivalence statistics over a strictly increasing grid of sample sizes.
/// `base.n` is ignored; every other setting is shared across the grid.
pub fn equivalence_curve(
    base: &ScenarioConfig,
    ns: &[usize],
    comparisons: &[Comparison],
) -> Result<Vec<CurvePoint>> {
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "sample-size grid must be nonempty and strictly increasing".into(),
        ));
    }
    let estimators: Vec<Estimator> = comparisons.iter().flat_map(|c| [c.left, c.right]).collect();
    ns.iter()
        .map(|&n| {
            let cfg = ScenarioConfig { n, ..*base };
            let records = run_replications(&cfg, &estimators)?;
            let values = comparisons
                .iter()
                .map(|c| equivalence_statistic(n, &records, c.component, c.left, c.right))
                .collect();
            Ok((n, values))
        })
        .collect()
}

/// Writes one row per (replication, estimator) with the flattened estimates.
pub fn write_replications_csv<W: Write + ?Sized>(
    records: &[ReplicationRecord],
    d: usize,
    out: &mut W,
) -> std::io::Result<()> {
    let mut header = vec![
        "replication".to_string(),
        "estimator".into(),
        "status".into(),
        "iterations".into(),
    ];
    header.extend((1..=d).map(|j| format!("mu{j}")));
    for j in 1..=d {
        for k in j..=d {
            header.push(format!("sigma{j}_{k}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        for (e, res) in &r.results {
            let mut fields = vec![r.replication.to_string(), e.label().to_string()];
            match res {
                Ok(est) => {
                    fields.push(if est.converged { "ok" } else { "not_converged" }.into());
                    fields.push(est.iterations.to_string());
                    fields.extend(est.mu.iter().map(f64::to_string));
                    for j in 0..d {
                        for k in j..d {
                            fields.push(est.sigma[(j, k)].to_string());
                        }
                    }
                }
                Err(_) => {
                    fields.push("failed".into());
                    fields.push(String::new());
                    fields.extend(std::iter::repeat_n(String::new(), d + d * (d + 1) / 2));
                }
            }
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::scenario::Scenario;

    #[test]
    fn self_comparison_is_exactly_zero() {
        let cfg = ScenarioConfig::new(Scenario::UniformWeights, 40, 5, 9);
        let same = Comparison {
            component: Component::OffDiagonal,
            left: Estimator::CwMeanCwCov,
            right: Estimator::CwMeanCwCov,
        };
        let curve = equivalence_curve(&cfg, &[20, 40], &[same]).unwrap();
        for (_, v) in curve {
            assert_eq!(v, vec![Some(0.0)]);
        }
    }

    #[test]
    fn grid_must_increase() {
        let cfg = ScenarioConfig::new(Scenario::UniformWeights, 40, 2, 9);
        assert!(equivalence_curve(&cfg, &[40, 20], &Comparison::STANDARD).is_err());
        assert!(equivalence_curve(&cfg, &[], &Comparison::STANDARD).is_err());
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        // n = 1 with MCAR weights often leaves a column unobserved.
        let cfg = ScenarioConfig::new(Scenario::Mcar { p: 0.5 }, 1, 40, 2);
        let s = run_simulation(&cfg, &[Estimator::CwMeanCwCov]).unwrap();
        let e = s.estimator(Estimator::CwMeanCwCov).unwrap();
        assert_eq!(e.successes + e.failures, 40);
        assert!(e.failures > 0);
    }

    #[test]
    fn replication_csv_shape() {
        let cfg = ScenarioConfig::new(Scenario::UniformWeights, 30, 2, 1);
        let records = run_replications(&cfg, &Estimator::ALL).unwrap();
        let mut buf = Vec::new();
        write_replications_csv(&records, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert_eq!(
            lines[0],
            "replication,estimator,status,iterations,mu1,mu2,sigma1_1,sigma1_2,sigma2_2"
        );
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 9));
    }
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Cholesky, Vector2};
use serde::Serialize;

use crate::cwmle::{fit_cwmle, fit_unweighted, EmConfig, EmInit};
use crate::data::{
    load_weighted_csv, write_incomplete_to, EstimateReport, GaussianParams, Method, WeightedDataset,
};
use crate::error::{Error, Result};
use crate::estimators::{explicit_estimate, PairWeightRule};
use crate::simulate::{
    equivalence_curve, run_replications, summarize, write_replications_csv, Comparison, CurvePoint,
    Estimator, Scenario, ScenarioConfig, WeightMap,
};
use crate::unpack::unpack_dataset;

pub const DEFAULT_ELLIPSE_POINTS: usize = 360;
pub const DEFAULT_COVERAGE: f64 = 0.95;

/// Tolerance ellipse `{x : (x - center)' shape^-1 (x - center) = q}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    pub shape: [[f64; 2]; 2],
    pub coverage: f64,
    /// Chi-squared quantile with 2 degrees of freedom at `coverage`.
    pub q: f64,
    pub boundary: Vec<[f64; 2]>,
}

/// Boundary of the `coverage` tolerance ellipse of a bivariate Gaussian,
/// sampled at `k` equispaced angles.
pub fn ellipse(params: &GaussianParams, coverage: f64, k: usize) -> Result<EllipseSpec> {
    if params.dim() != 2 {
        return Err(Error::Dimension(format!(
            "ellipse needs 2 variables, got {}",
            params.dim()
        )));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "coverage must lie in (0, 1), got {coverage}"
        )));
    }
    if k < 3 {
        return Err(Error::InvalidConfig(format!(
            "ellipse needs at least 3 points, got {k}"
        )));
    }
    let sigma = &params.sigma;
    let chol = Cholesky::new(sigma.clone()).ok_or(Error::SingularBlock {
        pattern: vec![0, 1],
    })?;
    let l = chol.l();
    let q = -2.0 * (-coverage).ln_1p();
    let r = q.sqrt();
    let boundary = (0..k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let u = Vector2::new(t.cos(), t.sin());
            let p = &l * u;
            [params.mu[0] + r * p[0], params.mu[1] + r * p[1]]
        })
        .collect();
    Ok(EllipseSpec {
        center: [params.mu[0], params.mu[1]],
        shape: [
            [sigma[(0, 0)], sigma[(0, 1)]],
            [sigma[(1, 0)], sigma[(1, 1)]],
        ],
        coverage,
        q,
        boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cwmle,
    CwmeanCwcov,
    CwmeanSqrtcov,
    Unweighted,
}

impl MethodArg {
    pub fn method(self) -> Method {
        match self {
            MethodArg::Cwmle => Method::CwMle,
            MethodArg::CwmeanCwcov => Method::CwMeanCwCov,
            MethodArg::CwmeanSqrtcov => Method::CwMeanSqrtCov,
            MethodArg::Unweighted => Method::UnweightedMle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Warm,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Jitter,
    Uniform,
    Mcar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightMapArg {
    InvVarSquared,
    InvVar,
}

/// Fits one of the estimators. Explicit estimates are floored to PSD when
/// `regularize` is set; the EM-based fits ignore it.
pub fn estimate(
    ds: &WeightedDataset,
    method: Method,
    em: &EmConfig,
    regularize: bool,
) -> Result<EstimateReport> {
    match method {
        Method::CwMle => fit_cwmle(ds, em),
        Method::UnweightedMle => fit_unweighted(ds, em),
        Method::CwMeanCwCov => explicit_estimate(ds, PairWeightRule::Min, regularize),
        Method::CwMeanSqrtCov => explicit_estimate(ds, PairWeightRule::Sqrt, regularize),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipseEntry {
    pub method: Method,
    pub variables: [String; 2],
    pub correlation: f64,
    pub ellipse: EllipseSpec,
}

/// Fits each method on all variables, restricts the estimate to the two
/// chosen variables and returns its tolerance ellipse.
pub fn ellipses(
    ds: &WeightedDataset,
    methods: &[Method],
    vars: [usize; 2],
    coverage: f64,
    k: usize,
    em: &EmConfig,
) -> Result<Vec<EllipseEntry>> {
    let name = |j: usize| {
        ds.column_names()
            .map(|n| n[j].clone())
            .unwrap_or_else(|| format!("c{}", j + 1))
    };
    methods
        .iter()
        .map(|&m| {
            let report = estimate(ds, m, em, true)?;
            let sub = report.params.select(&vars)?;
            Ok(EllipseEntry {
                method: m,
                variables: [name(vars[0]), name(vars[1])],
                correlation: sub.correlation(0, 1),
                ellipse: ellipse(&sub, coverage, k)?,
            })
        })
        .collect()
}

pub fn write_ellipses_csv<W: Write + ?Sized>(
    entries: &[EllipseEntry],
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "method,point,x,y")?;
    for e in entries {
        let label = serde_json::to_value(e.method).expect("method serializes");
        let label = label.as_str().unwrap_or_default();
        for (i, p) in e.ellipse.boundary.iter().enumerate() {
            writeln!(out, "{label},{i},{},{}", p[0], p[1])?;
        }
    }
    Ok(())
}

pub fn write_curve_csv<W: Write + ?Sized>(
    points: &[CurvePoint],
    comparisons: &[Comparison],
    out: &mut W,
) -> io::Result<()> {
    let mut header = vec!["n".to_string()];
    header.extend(comparisons.iter().map(Comparison::label));
    writeln!(out, "{}", header.join(","))?;
    for (n, values) in points {
        let cells: Vec<String> = values
            .iter()
            .map(|v| v.map_or_else(|| "NA".to_string(), |x| x.to_string()))
            .collect();
        writeln!(out, "{n},{}", cells.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "cellweight",
    version,
    about = "Gaussian estimation for cellwise weighted data"
)]
pub struct Cli {
    /// Output file (standard output when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads for the simulation harness (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Data matrix CSV; "NA" marks a missing cell.
    #[arg(long)]
    pub data: PathBuf,
    /// Weight matrix CSV with the same shape.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    #[arg(long, default_value_t = EmConfig::default().max_iter)]
    pub max_iter: usize,
    #[arg(long, default_value_t = EmConfig::default().tol)]
    pub tol: f64,
    #[arg(long, value_enum, default_value = "warm")]
    pub init: InitArg,
    /// Also require the relative parameter change to fall below this.
    #[arg(long)]
    pub param_tol: Option<f64>,
}

impl EmArgs {
    pub fn config(&self) -> EmConfig {
        EmConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            init: match self.init {
                InitArg::Warm => EmInit::CwCovWarmStart,
                InitArg::Identity => EmInit::MeanIdentity,
            },
            param_tol: self.param_tol,
            ..EmConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Fraction of jittered cells.
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    /// Standard deviation of the jitter noise.
    #[arg(long, default_value_t = 3.0)]
    pub noise_sd: f64,
    #[arg(long, value_enum, default_value = "inv-var-squared")]
    pub weight_map: WeightMapArg,
    /// Probability of a unit weight in the MCAR scenario.
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
}

impl ScenarioArgs {
    pub fn config(&self, n: usize, seed: u64) -> ScenarioConfig {
        let scenario = match self.scenario {
            ScenarioArg::Jitter => Scenario::Jitter {
                contamination: self.epsilon,
                noise_sd: self.noise_sd,
                weight_map: match self.weight_map {
                    WeightMapArg::InvVarSquared => WeightMap::InverseVarianceSquared,
                    WeightMapArg::InvVar => WeightMap::InverseVariance,
                },
            },
            ScenarioArg::Uniform => Scenario::UniformWeights,
            ScenarioArg::Mcar => Scenario::Mcar { p: self.p },
        };
        ScenarioConfig::new(scenario, n, self.reps, seed).with_dim(self.d)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the unpacked (rowwise weighted, incomplete) dataset as CSV.
    Unpack(InputArgs),
    /// Estimate location and scatter; prints a JSON report.
    Estimate {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        em: EmArgs,
        /// Report the raw explicit estimate even when it is not PSD.
        #[arg(long)]
        no_regularize: bool,
    },
    /// Monte Carlo simulation; prints a JSON summary.
    #[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
    Simulate {
        #[command(flatten)]
        scenario: Option<ScenarioArgs>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Also write every replication's estimates to this CSV file.
        #[arg(long)]
        per_rep_csv: Option<PathBuf>,
        #[command(subcommand)]
        curve: Option<SimulateCommand>,
    },
    /// Tolerance ellipses of two variables; prints JSON (or CSV points).
    Ellipse {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["cwmle", "cwmean-cwcov", "unweighted"])]
        method: Vec<MethodArg>,
        /// Two variables, by header name or 1-based index.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        vars: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_COVERAGE)]
        coverage: f64,
        #[arg(long, default_value_t = DEFAULT_ELLIPSE_POINTS)]
        points: usize,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Equivalence statistics between cwMLE and its approximations over a grid of n.
    Curve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 1000, 5000])]
        n: Vec<usize>,
    },
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let mut w = sink(out)?;
    let target = out.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(target, e))
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    emit(out, |w| writeln!(w, "{text}"))
}

fn resolve_vars(ds: &WeightedDataset, vars: &[String]) -> Result<[usize; 2]> {
    if vars.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "--vars needs exactly two variables, got {}",
            vars.len()
        )));
    }
    let find = |v: &String| {
        ds.column_index(v)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variable {v:?}")))
    };
    Ok([find(&vars[0])?, find(&vars[1])?])
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // Fails only when a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Unpack(input) => {
            let ds = load_weighted_csv(&input.data, &input.weights)?;
            let u = unpack_dataset(&ds)?;
            emit(out, |w| write_incomplete_to(&u, w))
        }
        Command::Estimate {
            input,
            method,
            em,
            no_regularize,
        } => {
            let ds = load_weighted_csv(&input.data, &input.weights)?;
            let cfg = em.config();
            cfg.validate()?;
            let report = estimate(&ds, method.method(), &cfg, !no_regularize)?;
            emit_text(out, &report.to_json())
        }
        Command::Simulate {
            curve: Some(SimulateCommand::Curve { scenario, n }),
            ..
        } => {
            let base = scenario.config(n.first().copied().unwrap_or(1), cli.seed);
            let points = equivalence_curve(&base, &n, &Comparison::STANDARD)?;
            emit(out, |w| write_curve_csv(&points, &Comparison::STANDARD, w))
        }
        Command::Simulate {
            scenario,
            n,
            per_rep_csv,
            curve: None,
        } => {
            let scenario =
                scenario.ok_or_else(|| Error::InvalidConfig("--scenario is required".into()))?;
            let cfg = scenario.config(n, cli.seed);
            let records = run_replications(&cfg, &Estimator::ALL)?;
            if let Some(path) = per_rep_csv.as_deref() {
                emit(Some(path), |w| write_replications_csv(&records, cfg.d, w))?;
            }
            emit_text(out, &summarize(&cfg, &records).to_json())
        }
        Command::Ellipse {
            input,
            method,
            vars,
            coverage,
            points,
            csv,
        } => {
            let ds = load_weighted_csv(&input.data, &input.weights)?;
            let vars = resolve_vars(&ds, &vars)?;
            let methods: Vec<Method> = method.iter().map(|m| m.method()).collect();
            let entries = ellipses(&ds, &methods, vars, coverage, points, &EmConfig::default())?;
            if csv {
                emit(out, |w| write_ellipses_csv(&entries, w))
            } else {
                let json = serde_json::to_string_pretty(&entries)
                    .expect("ellipse serialization cannot fail");
                emit_text(out, &json)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn isotropic_circle() {
        let p = GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        let e = ellipse(&p, 0.95, 360).unwrap();
        let r = (-2.0 * 0.05f64.ln()).sqrt();
        assert!((r - 2.4477).abs() < 1e-4);
        for b in &e.boundary {
            assert!((b[0].hypot(b[1]) - r).abs() < 1e-12);
        }
        assert_eq!(e.boundary.len(), 360);
    }

    #[test]
    fn unit_circle_when_q_is_one() {
        let p = GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        let e = ellipse(&p, 1.0 - (-0.5f64).exp(), 8).unwrap();
        assert!((e.q - 1.0).abs() < 1e-12);
        for b in &e.boundary {
            assert!((b[0].hypot(b[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_satisfies_quadratic_form() {
        let p = GaussianParams::new(dvector![1.0, -2.0], dmatrix![2.0, 0.9; 0.9, 0.7]).unwrap();
        let e = ellipse(&p, 0.95, 50).unwrap();
        let inv = p.sigma.clone().try_inverse().unwrap();
        for b in &e.boundary {
            let z = dvector![b[0] - 1.0, b[1] + 2.0];
            let form = (z.transpose() * &inv * &z)[(0, 0)];
            assert!((form - e.q).abs() < 1e-9);
        }
    }

    #[test]
    fn ellipse_errors() {
        let singular =
            GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        assert!(ellipse(&singular, 0.95, 10).is_err());
        let p = GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        assert!(ellipse(&p, 1.0, 10).is_err());
        assert!(ellipse(&p, 0.0, 10).is_err());
        assert!(ellipse(&p, 0.5, 2).is_err());
    }

    #[test]
    fn parses_simulate_forms() {
        let cli = Cli::try_parse_from([
            "cellweight",
            "simulate",
            "--scenario",
            "uniform",
            "--n",
            "50",
            "--reps",
            "3",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::Simulate {
                curve: None,
                n: 50,
                ..
            }
        ));
        let cli = Cli::try_parse_from([
            "cellweight",
            "simulate",
            "curve",
            "--scenario",
            "mcar",
            "--n",
            "10,20",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate {
                curve: Some(SimulateCommand::Curve { n, .. }),
                ..
            } => assert_eq!(n, vec![10, 20]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Cli::try_parse_from(["cellweight", "estimate", "--method", "bogus"]).is_err());
    }
}

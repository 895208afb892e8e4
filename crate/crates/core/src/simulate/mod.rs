//! Monte Carlo harness for the cellwise weighted estimators.
//!
//! Three data-generating scenarios are provided (jittered cells, uniform
//! random weights, MCAR zero-one weights). Each replication draws its data
//! from random streams keyed by `(seed, replication)`, replications run in
//! parallel, and aggregation walks the records in replication order, so a
//! summary is bit-identical for a given seed regardless of thread count.

mod factor;
mod harness;
mod scenario;

pub use factor::{
    variance_factor, FactorSource, VarianceFactor, WeightDistribution, MIN_FACTOR_SAMPLES,
};
pub use harness::{
    equivalence_curve, equivalence_statistic, run_replications, run_simulation, summarize,
    write_replications_csv, Comparison, Component, ComponentStats, CurvePoint, EquivalenceStats,
    Estimate, Estimator, EstimatorSummary, ReplicationRecord, SimulationSummary,
};
pub use scenario::{generate_scenario, simulation_em_config, Scenario, ScenarioConfig, WeightMap};

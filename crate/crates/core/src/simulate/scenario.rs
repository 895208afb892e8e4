use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cwmle::{EmConfig, EmInit};
use crate::data::WeightedDataset;
use crate::error::{Error, Result};

/// Maps a cell variance `v` to a cell weight in the jitter scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMap {
    /// `w = 1 / v^2`
    InverseVarianceSquared,
    /// `w = 1 / v`
    InverseVariance,
}

impl WeightMap {
    pub fn weight(self, variance: f64) -> f64 {
        match self {
            WeightMap::InverseVarianceSquared => 1.0 / (variance * variance),
            WeightMap::InverseVariance => 1.0 / variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Standard Gaussian data; a fraction of cells gets extra Gaussian noise
    /// and a correspondingly lower weight.
    Jitter {
        contamination: f64,
        noise_sd: f64,
        weight_map: WeightMap,
    },
    /// Standard Gaussian data with i.i.d. Uniform[0, 1] weights.
    UniformWeights,
    /// Standard Gaussian data with i.i.d. Bernoulli(p) weights.
    Mcar { p: f64 },
}

impl Scenario {
    pub fn jitter() -> Self {
        Scenario::Jitter {
            contamination: 0.2,
            noise_sd: 3.0,
            weight_map: WeightMap::InverseVarianceSquared,
        }
    }

    pub fn mcar() -> Self {
        Scenario::Mcar { p: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub d: usize,
    pub replications: usize,
    pub seed: u64,
    /// EM settings for the cwMLE fits inside the harness.
    #[serde(skip)]
    pub em: EmConfig,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, replications: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            d: 2,
            replications,
            seed,
            em: simulation_em_config(),
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 || self.d == 0 {
            return bad(format!(
                "n and d must be positive, got n={} d={}",
                self.n, self.d
            ));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        match self.scenario {
            Scenario::Jitter {
                contamination,
                noise_sd,
                ..
            } => {
                if !(0.0..=1.0).contains(&contamination) {
                    return bad(format!(
                        "contamination must lie in [0, 1], got {contamination}"
                    ));
                }
                if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
                    return bad(format!("noise sd must be nonnegative, got {noise_sd}"));
                }
            }
            Scenario::Mcar { p } => {
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("p must lie in (0, 1], got {p}"));
                }
            }
            Scenario::UniformWeights => {}
        }
        self.em.validate()
    }
}

/// EM settings used by the harness: scaled-identity start (so the cwMLE is
/// never seeded with the estimators it is compared against) and a tight
/// stopping rule.
pub fn simulation_em_config() -> EmConfig {
    EmConfig {
        max_iter: 5000,
        tol: 1e-12,
        init: EmInit::MeanIdentity,
        ridge: 1e-10,
        param_tol: None,
    }
}

/// Random stream tags within one replication.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Data = 0,
    Jitter = 1,
    Weights = 2,
}

/// Generator keyed by `(seed, replication, stream)`; each key gets its own
/// ChaCha stream so replications can run in any order.
pub(crate) fn stream_rng(seed: u64, replication: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replication as u64) * 4 + stream as u64);
    rng
}

/// Draws replication `replication` of the configured scenario.
pub fn generate_scenario(cfg: &ScenarioConfig, replication: usize) -> Result<WeightedDataset> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);
    let mut data_rng = stream_rng(cfg.seed, replication, Stream::Data);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = data_rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut w = DMatrix::from_element(n, d, 1.0);
    match cfg.scenario {
        Scenario::Jitter {
            contamination,
            noise_sd,
            weight_map,
        } => {
            let mut rng = stream_rng(cfg.seed, replication, Stream::Jitter);
            let cells = n * d;
            let count = ((contamination * cells as f64).round() as usize).min(cells);
            let mut chosen = rand::seq::index::sample(&mut rng, cells, count).into_vec();
            chosen.sort_unstable();
            let clean = weight_map.weight(1.0);
            let noisy = weight_map.weight(noise_sd * noise_sd + 1.0);
            w.fill(clean);
            for cell in chosen {
                let (i, j) = (cell / d, cell % d);
                x[(i, j)] += noise_sd * rng.sample::<f64, _>(StandardNormal);
                w[(i, j)] = noisy;
            }
        }
        Scenario::UniformWeights => {
            let mut rng = stream_rng(cfg.seed, replication, Stream::Weights);
            for i in 0..n {
                for j in 0..d {
                    w[(i, j)] = rng.random::<f64>();
                }
            }
        }
        Scenario::Mcar { p } => {
            let mut rng = stream_rng(cfg.seed, replication, Stream::Weights);
            for i in 0..n {
                for j in 0..d {
                    w[(i, j)] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                }
            }
        }
    }
    WeightedDataset::new(x, w)
}

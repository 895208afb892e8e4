use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Minimum sample count accepted by [`variance_factor`] for sampled weights.
pub const MIN_FACTOR_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightDistribution {
    /// Uniform on [0, 1].
    Uniform,
    /// Bernoulli with success probability `p`.
    Bernoulli(f64),
    /// Empirical draws of W. Pair weights are formed from consecutive
    /// disjoint pairs of draws.
    Samples(Vec<f64>),
}

impl WeightDistribution {
    /// Draws `count` weights. Only defined for the parametric variants.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        match *self {
            WeightDistribution::Uniform => (0..count).map(|_| rng.random::<f64>()).collect(),
            WeightDistribution::Bernoulli(p) => (0..count)
                .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect(),
            WeightDistribution::Samples(ref s) => s.iter().copied().cycle().take(count).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorSource {
    Uniform,
    Bernoulli { p: f64 },
    Samples { count: usize },
}

/// Asymptotic variance inflation caused by random weights.
///
/// `v_w = E[W^2] / E[W]^2` applies to cwMean and the covariance diagonal;
/// `v_min` and `v_sqrt` apply to off-diagonal entries of cwCov and sqrtCov,
/// using `min(W1, W2)` and `sqrt(W1 W2)` for independent copies of W.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceFactor {
    pub source: FactorSource,
    pub v_w: f64,
    pub v_min: f64,
    pub v_sqrt: f64,
    /// Coefficient of variation of W; `v_w = cv^2 + 1`.
    pub cv: f64,
}

impl VarianceFactor {
    /// Asymptotic efficiency of cwMean relative to the unweighted mean.
    pub fn efficiency(&self) -> f64 {
        1.0 / self.v_w
    }
}

fn ratio(second_moment: f64, first_moment: f64) -> Result<f64> {
    if first_moment == 0.0 {
        return Err(Error::ZeroMeanWeight);
    }
    Ok(second_moment / (first_moment * first_moment))
}

pub fn variance_factor(dist: &WeightDistribution) -> Result<VarianceFactor> {
    match *dist {
        WeightDistribution::Uniform => {
            // W ~ U[0,1]: E W = 1/2, E W^2 = 1/3.
            // min(W1,W2) has density 2(1-w): E = 1/3, E^2 = 1/6.
            // sqrt(W1 W2): E = (2/3)^2 = 4/9, E^2 = E[W1] E[W2] = 1/4.
            let v_w = 4.0 / 3.0;
            Ok(VarianceFactor {
                source: FactorSource::Uniform,
                v_w,
                v_min: 1.5,
                v_sqrt: 81.0 / 64.0,
                cv: (v_w - 1.0).sqrt(),
            })
        }
        WeightDistribution::Bernoulli(p) => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::ZeroMeanWeight);
            }
            // E W = E W^2 = p; min and sqrt of two draws are Bernoulli(p^2).
            let v_w = 1.0 / p;
            let pair = 1.0 / (p * p);
            Ok(VarianceFactor {
                source: FactorSource::Bernoulli { p },
                v_w,
                v_min: pair,
                v_sqrt: pair,
                cv: (v_w - 1.0).max(0.0).sqrt(),
            })
        }
        WeightDistribution::Samples(ref s) => sampled_factor(s),
    }
}

fn sampled_factor(samples: &[f64]) -> Result<VarianceFactor> {
    if samples.len() < MIN_FACTOR_SAMPLES {
        return Err(Error::InsufficientSamples {
            required: MIN_FACTOR_SAMPLES,
            got: samples.len(),
        });
    }
    if let Some(&bad) = samples.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidWeight {
            row: 0,
            col: 0,
            value: bad,
        });
    }
    let moments = |it: &mut dyn Iterator<Item = f64>| {
        let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
        for v in it {
            n += 1;
            s1 += v;
            s2 += v * v;
        }
        (s1 / n as f64, s2 / n as f64)
    };
    let (m1, m2) = moments(&mut samples.iter().copied());
    let pairs = samples.chunks_exact(2);
    let (min1, min2) = moments(&mut pairs.clone().map(|p| p[0].min(p[1])));
    let (sq1, sq2) = moments(&mut pairs.map(|p| (p[0] * p[1]).sqrt()));

    let v_w = ratio(m2, m1)?;
    let var = samples.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(VarianceFactor {
        source: FactorSource::Samples {
            count: samples.len(),
        },
        v_w,
        v_min: ratio(min2, min1)?,
        v_sqrt: ratio(sq2, sq1)?,
        cv: var.sqrt() / m1,
    })
}

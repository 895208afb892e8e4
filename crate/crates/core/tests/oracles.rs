mod common;

use cellweight::cwmle::observed_loglik;
use cellweight::simulate::{
    run_simulation, Estimator, Scenario, ScenarioConfig, WeightDistribution,
};
use cellweight::{
    fit_cwmle, fit_unweighted, load_weighted_csv, unpack_dataset, EmConfig, EmInit, GaussianParams,
    WeightedDataset,
};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn abc_loglik_matches_layered_evaluation() {
    let ds = load_weighted_csv(fixture("abc_data.csv"), fixture("abc_weights.csv")).unwrap();
    let mu = DVector::from_vec(vec![2.5, 5.4, 4.5, 7.4]);
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.3, 0.1, 0.0, 0.05, //
            0.0, 0.4, 0.1, 0.0, //
            0.1, 0.0, 0.3, 0.1, //
            0.0, 0.05, 0.0, 0.2,
        ],
    );
    let sigma = &a * a.transpose() + DMatrix::identity(4, 4) * 0.05;
    let theta = GaussianParams::new(mu.clone(), sigma.clone()).unwrap();
    let got = observed_loglik(&unpack_dataset(&ds).unwrap(), &theta).unwrap();
    let want: f64 = (0..ds.nrows())
        .map(|i| {
            let x: Vec<f64> = ds.values().row(i).iter().copied().collect();
            let w: Vec<f64> = ds.weights().row(i).iter().copied().collect();
            layered_loglik(&x, &w, &mu, &sigma)
        })
        .sum();
    assert!(
        (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
        "{got} vs {want}"
    );
}

#[test]
fn warm_start_reaches_the_same_fit_with_no_more_iterations() {
    let ds = load_weighted_csv(
        fixture("personality_data.csv"),
        fixture("personality_weights.csv"),
    )
    .unwrap();
    let cfg = |init| EmConfig {
        max_iter: 100_000,
        tol: 1e-14,
        init,
        ridge: 1e-10,
        param_tol: Some(1e-12),
    };
    let warm = fit_cwmle(&ds, &cfg(EmInit::CwCovWarmStart)).unwrap();
    let cold = fit_cwmle(&ds, &cfg(EmInit::MeanIdentity)).unwrap();
    assert!(warm.converged && cold.converged);
    assert!((&warm.params.mu - &cold.params.mu).amax() <= 1e-6);
    assert!(max_abs_diff(&warm.params.sigma, &cold.params.sigma) <= 1e-6);
    assert!(
        warm.iterations <= cold.iterations,
        "{} > {}",
        warm.iterations,
        cold.iterations
    );
}

#[test]
fn zero_one_weights_make_cwmle_the_unweighted_incomplete_mle() {
    let x = DMatrix::from_row_slice(
        6,
        2,
        &[
            0.1, 1.0, 2.0, -0.5, -1.0, 0.3, 0.7, 2.2, 1.5, -1.2, -0.4, 0.9,
        ],
    );
    let w = DMatrix::from_row_slice(
        6,
        2,
        &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    );
    let ds = WeightedDataset::new(x, w).unwrap();
    let cfg = fixed_point_em(EmInit::MeanIdentity);
    let a = fit_cwmle(&ds, &cfg).unwrap();
    let b = fit_unweighted(&ds, &cfg).unwrap();
    assert!((&a.params.mu - &b.params.mu).amax() <= 1e-12);
    assert!(max_abs_diff(&a.params.sigma, &b.params.sigma) <= 1e-12);
}

#[test]
fn uniform_min_pair_weight_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = WeightDistribution::Uniform.sample(&mut rng, 2_000_000);
    let mins: Vec<f64> = draws.chunks_exact(2).map(|p| p[0].min(p[1])).collect();
    let m1 = mins.iter().sum::<f64>() / mins.len() as f64;
    let m2 = mins.iter().map(|v| v * v).sum::<f64>() / mins.len() as f64;
    assert!((m1 - 1.0 / 3.0).abs() < 1e-2, "{m1}");
    assert!((m2 - 1.0 / 6.0).abs() < 1e-2, "{m2}");
}

#[test]
fn summary_is_identical_across_thread_counts() {
    let cfg = ScenarioConfig::new(Scenario::jitter(), 200, 40, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_simulation(&cfg, &Estimator::ALL).unwrap().to_json())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn sqrtcov_offdiag_is_more_efficient_under_uniform_weights() {
    let cfg = ScenarioConfig::new(Scenario::UniformWeights, 2000, 300, 8);
    let s = run_simulation(&cfg, &[Estimator::CwMeanCwCov, Estimator::CwMeanSqrtCov]).unwrap();
    let off = |e| s.estimator(e).unwrap().off_diagonal.unwrap().mse_factor;
    assert!(off(Estimator::CwMeanSqrtCov) < off(Estimator::CwMeanCwCov));
}

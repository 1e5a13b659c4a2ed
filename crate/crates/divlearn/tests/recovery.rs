//! Realizable noiseless recovery: with the truth inside the hypothesis class
//! and no label noise, the train-phase ERM drives the empirical risk to
//! (near) zero for every additive-noise family. Logistic labels stay
//! Bernoulli even at the truth, so that family has no zero-risk target and is
//! covered by its excess-risk tests instead.

use divlearn::envs::{make_environment, sample_task_dataset, EnvOptions, Family};
use divlearn::erm::{train_phase_erm, OptConfig};

fn noiseless_opts() -> EnvOptions {
    EnvOptions { noise_scale: 0.0, ..EnvOptions::default() }
}

#[test]
fn linear_regression_recovers() {
    let env = make_environment(Family::LinearRegression, 8, 2, 3, 5, &noiseless_opts()).unwrap();
    let datasets: Vec<_> =
        (1..=3).map(|j| sample_task_dataset(&env, j, 250, 0).unwrap()).collect();
    let opt = OptConfig { restarts: 3, seed: 1, ..OptConfig::default() };
    let fit = train_phase_erm(&datasets, &env.class_spec(), &opt).unwrap();
    assert!(fit.final_empirical_risk <= 1e-5, "risk {}", fit.final_empirical_risk);
}

#[test]
fn nn_regression_recovers() {
    let mut opts = noiseless_opts();
    opts.nn_hidden = vec![6];
    let env = make_environment(Family::NnRegression, 4, 1, 2, 77, &opts).unwrap();
    let datasets: Vec<_> =
        (1..=2).map(|j| sample_task_dataset(&env, j, 300, 0).unwrap()).collect();
    let opt = OptConfig {
        max_iters: 6000,
        restarts: 4,
        tol_grad: 1e-11,
        seed: 3,
        ..OptConfig::default()
    };
    let fit = train_phase_erm(&datasets, &env.class_spec(), &opt).unwrap();
    assert!(fit.final_empirical_risk <= 1e-5, "risk {}", fit.final_empirical_risk);
}

#[test]
fn index_model_recovers() {
    let env = make_environment(Family::IndexModel, 6, 1, 2, 55, &noiseless_opts()).unwrap();
    let mut class = env.class_spec();
    // a finer knot grid shrinks the piecewise-linear representation error
    class.link_knots = 65;
    let datasets: Vec<_> =
        (1..=2).map(|j| sample_task_dataset(&env, j, 400, 0).unwrap()).collect();
    let opt = OptConfig {
        max_iters: 1500,
        restarts: 4,
        tol_grad: 1e-11,
        seed: 3,
        ..OptConfig::default()
    };
    let fit = train_phase_erm(&datasets, &class, &opt).unwrap();
    assert!(fit.final_empirical_risk <= 1e-5, "risk {}", fit.final_empirical_risk);
}

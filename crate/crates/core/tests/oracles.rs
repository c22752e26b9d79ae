mod common;

use msmspline::estimator::{fit, fit_theta, initial_theta, FitOptions};
use msmspline::likelihood::{evaluate, loglik, score, PenaltyConfig, Want};
use msmspline::markov::{
    build_generator, dp_auto, dq_dtheta, expm_pade, transition_matrix_with, Baseline, EigenDecomp,
    ModelParams, ModelSpec, Transition, TransitionStructure,
};
use msmspline::splinebasis::KnotVector;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::*;

fn central_difference(theta: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn score_matches_finite_differences() {
    let mut r = rng(11);
    for _ in 0..25 {
        let inst = random_instance(&mut r, 4, 20);
        let g = score(&inst.spec, &inst.params, &inst.data, &inst.options).unwrap();
        let fd = central_difference(&inst.params.theta, |t| {
            loglik(
                &inst.spec,
                &ModelParams { theta: t.clone() },
                &inst.data,
                &inst.options,
            )
            .unwrap()
        });
        for (a, f) in g.iter().zip(&fd) {
            assert!((a - f).abs() / f.abs().max(1.0) < 1e-4, "{a} vs {f}");
        }
    }
}

#[test]
fn transition_derivative_matches_finite_differences() {
    let mut r = rng(12);
    for _ in 0..25 {
        let spec = random_spec(&mut r, 4);
        let params = random_params(&mut r, &spec);
        let x: Vec<f64> = (0..spec.structure().n_covariates())
            .map(|_| normal(&mut r))
            .collect();
        let t = r.random_range(0.0..5.0);
        let dt = r.random_range(0.1..2.0);
        let k = r.random_range(0..spec.n_params());
        let q = build_generator(&spec, &params, t, &x).unwrap();
        let dq = dq_dtheta(&spec, &params, t, &x, k).unwrap();
        let dp = dp_auto(&q, &EigenDecomp::new(&q), &dq, dt);
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut p = params.clone();
            p.theta[k] += s;
            expm_pade(&build_generator(&spec, &p, t, &x).unwrap(), dt)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((dp - fd).amax() < 1e-6);
    }
}

#[test]
fn eigen_and_pade_agree_on_a_tied_generator() {
    // two living states leaving at the same rate: repeated eigenvalue
    let q = DMatrix::from_row_slice(3, 3, &[-0.7, 0.0, 0.7, 0.0, -0.7, 0.7, 0.0, 0.0, 0.0]);
    let decomp = EigenDecomp::new(&q);
    let p = transition_matrix_with(&q, &decomp, 1.3).unwrap();
    assert!((&p - expm_pade(&q, 1.3)).amax() < 1e-10);
    assert!(((-0.7f64 * 1.3).exp() - p[(0, 0)]).abs() < 1e-12);
}

#[test]
fn constant_hazard_fit_matches_occurrence_over_exposure() {
    let data = weibull_two_state(5, 400, 1.0, 1.0 / 0.3);
    let structure = TransitionStructure::new(2, [Transition::new(0, 1)], vec![]).unwrap();
    let spec = ModelSpec::new(structure, vec![Baseline::Constant], false).unwrap();
    let f = fit(&spec, &data, &FitOptions::default()).unwrap();
    let (mut deaths, mut exposure) = (0.0, 0.0);
    for ind in data.individuals() {
        let obs = &ind.observations;
        exposure += obs.last().unwrap().time - obs[0].time;
        deaths += f64::from(obs.last().unwrap().state == 1);
    }
    assert!(f.converged);
    assert!((f.theta_hat.theta[0] - (deaths / exposure).ln()).abs() < 1e-6);
    assert!((f.std_errors()[0] * deaths.sqrt() - 1.0).abs() < 0.01);
}

#[test]
fn inner_fit_is_a_stationary_point() {
    let data = weibull_two_state(6, 200, 1.8, 6.0);
    let structure = TransitionStructure::new(2, [Transition::new(0, 1)], vec![]).unwrap();
    let knots = KnotVector::new(vec![0.0, 2.5, 5.0, 7.5, 10.0]).unwrap();
    let spec = ModelSpec::new(structure, vec![Baseline::spline(knots)], false).unwrap();
    let penalty = PenaltyConfig::new(&spec, vec![3.0]);
    let options = FitOptions::default();
    let inner = fit_theta(
        &spec,
        &penalty,
        &initial_theta(&spec, &data),
        &data,
        &options,
    )
    .unwrap();
    assert!(inner.converged);
    let params = ModelParams {
        theta: inner.theta.clone(),
    };
    let eval = evaluate(&spec, &params, &data, &options.likelihood, Want::Score).unwrap();
    let g = eval.score.unwrap() - penalty.apply(&inner.theta);
    assert!(g.amax() < 1e-4, "penalised score {g}");
}

#[test]
fn huge_smoothing_gives_a_linear_log_hazard() {
    let data = weibull_two_state(7, 300, 1.8, 6.0);
    let structure = TransitionStructure::new(2, [Transition::new(0, 1)], vec![]).unwrap();
    let knots = KnotVector::new(vec![0.0, 1.0, 3.0, 6.0, 10.0]).unwrap();
    let spec = ModelSpec::new(structure, vec![Baseline::spline(knots.clone())], false).unwrap();
    let options = FitOptions {
        fix_lambda: true,
        lambda_init: Some(vec![1e12]),
        ..FitOptions::default()
    };
    let f = fit(&spec, &data, &options).unwrap();
    let a = &f.theta_hat.theta;
    let k = knots.as_slice();
    let slope = (a[4] - a[0]) / (k[4] - k[0]);
    for j in 1..4 {
        assert!((a[j] - (a[0] + slope * (k[j] - k[0]))).abs() < 1e-4);
    }
    assert!((f.edf_total - 2.0).abs() < 1e-3);
}

#[test]
fn fits_are_reproducible() {
    let data = weibull_two_state(8, 150, 1.5, 5.0);
    let structure = TransitionStructure::new(2, [Transition::new(0, 1)], vec![]).unwrap();
    let knots = KnotVector::new(vec![0.0, 2.0, 4.0, 7.0, 10.0]).unwrap();
    let spec = ModelSpec::new(structure, vec![Baseline::spline(knots)], false).unwrap();
    let a = fit(&spec, &data, &FitOptions::default()).unwrap();
    let b = fit(&spec, &data, &FitOptions::default()).unwrap();
    assert_eq!(a.theta_hat.theta, b.theta_hat.theta);
    assert_eq!(a.lambda_hat, b.lambda_hat);
}

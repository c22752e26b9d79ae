//! Simulation-based confidence intervals for hazards and transition
//! probabilities.
//!
//! Parameter vectors are drawn from `N(theta_hat, V_theta)`, the function of
//! interest is evaluated at every draw, and the interval is formed by the
//! empirical `level/2` and `1 - level/2` quantiles. All entries of a matrix, or
//! all points of a curve, share one set of draws.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::FitResult;
use crate::markov::{hazard, interval_prob, MarkovError, ModelParams, ModelSpec, Transition};
use crate::quantile_type7;
use crate::simulate::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("invalid prediction request: {0}")]
    Request(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// A fitted model reduced to what prediction needs.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub theta: ModelParams,
    pub v_theta: DMatrix<f64>,
    /// Piecewise-constant span the hazards were estimated under; the default
    /// sub-interval width for predicted transition probabilities.
    pub approximation_width: f64,
}

impl From<&FitResult> for FittedModel {
    fn from(fit: &FitResult) -> Self {
        Self {
            spec: fit.spec.clone(),
            theta: fit.theta_hat.clone(),
            v_theta: fit.v_theta.clone(),
            approximation_width: fit.approximation_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub n_sims: usize,
    /// Two-sided level: intervals use the `level/2` and `1 - level/2` quantiles.
    pub level: f64,
    pub seed: u64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            n_sims: 1000,
            level: 0.05,
            seed: 1,
        }
    }
}

impl SimulationSettings {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.n_sims < 2 {
            return Err(InferenceError::Request(format!(
                "n_sims must be at least 2, got {}",
                self.n_sims
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(InferenceError::Request(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionKind {
    HazardCurve {
        transition: Transition,
        grid: Vec<f64>,
    },
    ProbabilityMatrix {
        t0: f64,
        t1: f64,
        grid_width: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub kind: PredictionKind,
    pub covariates: Vec<f64>,
    pub settings: SimulationSettings,
}

impl PredictionRequest {
    pub fn validate(&self, spec: &ModelSpec) -> Result<(), InferenceError> {
        self.settings.validate()?;
        let n_cov = spec.structure().n_covariates();
        if self.covariates.len() != n_cov {
            return Err(InferenceError::Request(format!(
                "{} covariate values for a model with {n_cov} covariates",
                self.covariates.len()
            )));
        }
        match &self.kind {
            PredictionKind::HazardCurve { transition, grid } => {
                if !spec.structure().is_allowed(transition.from, transition.to) {
                    return Err(MarkovError::Disallowed(*transition).into());
                }
                if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(InferenceError::Request(
                        "curve grid must be nonempty and strictly increasing".into(),
                    ));
                }
            }
            PredictionKind::ProbabilityMatrix { t0, t1, grid_width } => {
                if !(t1 >= t0) {
                    return Err(InferenceError::Request(format!(
                        "interval end {t1} precedes start {t0}"
                    )));
                }
                if !(*grid_width > 0.0) {
                    return Err(InferenceError::Request(format!(
                        "grid width must be positive, got {grid_width}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Point estimate with simulation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn exact(v: f64) -> Self {
        Self {
            point: v,
            lower: v,
            upper: v,
        }
    }
}

/// Symmetric square root of `v` after clamping eigenvalues below
/// `max * 1e-10` to zero; errors on materially negative eigenvalues.
pub fn covariance_root(v: &DMatrix<f64>) -> Result<DMatrix<f64>, InferenceError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(InferenceError::Numerical(
            "covariance has non-finite entries".into(),
        ));
    }
    let sym = (v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-8 * max.max(f64::MIN_POSITIVE) {
        return Err(InferenceError::Numerical(format!(
            "covariance is not positive semidefinite (eigenvalue {min:e})"
        )));
    }
    let floor = max * 1e-10;
    let roots = eig
        .eigenvalues
        .map(|l| if l > floor { l.sqrt() } else { 0.0 });
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= roots[j];
    }
    Ok(scaled * eig.eigenvectors.transpose())
}

/// `n` draws from `N(theta_hat, v)`; draw `m` uses RNG stream `m` of `seed`.
pub fn draw_params(
    theta_hat: &DVector<f64>,
    v: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, InferenceError> {
    let root = covariance_root(v)?;
    let q = theta_hat.len();
    Ok((0..n)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream_rng(seed, m as u64);
            let z = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
            theta_hat + &root * z
        })
        .collect())
}

/// Interval from the values of a function at the draws.
pub fn summarise(point: f64, mut values: Vec<f64>, level: f64) -> Estimate {
    values.sort_by(f64::total_cmp);
    Estimate {
        point,
        lower: quantile_type7(&values, level / 2.0),
        upper: quantile_type7(&values, 1.0 - level / 2.0),
    }
}

/// Evaluates a vector-valued function at `theta_hat` and every draw, and
/// summarises each component.
pub fn ci_of_vector_function<F>(
    model: &FittedModel,
    settings: &SimulationSettings,
    f: F,
) -> Result<Vec<Estimate>, InferenceError>
where
    F: Fn(&ModelParams) -> Result<Vec<f64>, InferenceError> + Sync,
{
    settings.validate()?;
    let point = f(&model.theta)?;
    let draws = draw_params(
        &model.theta.theta,
        &model.v_theta,
        settings.n_sims,
        settings.seed,
    )?;
    let values = draws
        .into_par_iter()
        .map(|theta| f(&ModelParams { theta }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(point
        .iter()
        .enumerate()
        .map(|(j, &p)| summarise(p, values.iter().map(|v| v[j]).collect(), settings.level))
        .collect())
}

/// Point estimate and interval for a scalar function of the parameters.
pub fn ci_of_function<F>(
    model: &FittedModel,
    settings: &SimulationSettings,
    f: F,
) -> Result<Estimate, InferenceError>
where
    F: Fn(&ModelParams) -> Result<f64, InferenceError> + Sync,
{
    let out = ci_of_vector_function(model, settings, |p| f(p).map(|v| vec![v]))?;
    Ok(out[0])
}

/// Transition probability matrix `P(t0, t1)` with entrywise intervals.
pub fn predict_p(
    model: &FittedModel,
    t0: f64,
    t1: f64,
    x: &[f64],
    grid_width: f64,
    settings: &SimulationSettings,
) -> Result<DMatrix<Estimate>, InferenceError> {
    PredictionRequest {
        kind: PredictionKind::ProbabilityMatrix { t0, t1, grid_width },
        covariates: x.to_vec(),
        settings: *settings,
    }
    .validate(&model.spec)?;
    let d = model.spec.n_states();
    let spec = &model.spec;
    let flat = ci_of_vector_function(model, settings, |p| {
        let m = interval_prob(spec, p, t0, t1, x, Some(grid_width))?;
        Ok(m.iter().copied().collect())
    })?;
    // column-major, matching `DMatrix::iter`
    Ok(DMatrix::from_vec(d, d, flat))
}

/// Hazard curve point on `grid`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    #[serde(flatten)]
    pub estimate: Estimate,
    /// `t` lies outside the knot range, where the log-hazard is extended linearly.
    pub extrapolated: bool,
}

/// Pointwise hazard with intervals on `grid`.
pub fn hazard_curve(
    model: &FittedModel,
    transition: Transition,
    grid: &[f64],
    x: &[f64],
    settings: &SimulationSettings,
) -> Result<Vec<CurvePoint>, InferenceError> {
    PredictionRequest {
        kind: PredictionKind::HazardCurve {
            transition,
            grid: grid.to_vec(),
        },
        covariates: x.to_vec(),
        settings: *settings,
    }
    .validate(&model.spec)?;
    let spec = &model.spec;
    let ti = spec
        .structure()
        .index_of(transition)
        .ok_or(MarkovError::Disallowed(transition))?;
    let range = spec.baselines()[ti].knots().map(|k| (k.first(), k.last()));
    let outside = |t: f64| range.is_some_and(|(lo, hi)| t < lo || t > hi);
    if grid.iter().any(|&t| outside(t)) {
        warn!("hazard curve for {transition} extends beyond the knot range");
    }
    let estimates = ci_of_vector_function(model, settings, |p| {
        grid.iter()
            .map(|&t| hazard(spec, p, transition, t, x).map_err(Into::into))
            .collect()
    })?;
    Ok(grid
        .iter()
        .zip(estimates)
        .map(|(&t, estimate)| CurvePoint {
            t,
            estimate,
            extrapolated: outside(t),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{Baseline, TransitionStructure};
    use crate::splinebasis::KnotVector;
    use approx::assert_relative_eq;

    fn model(v: DMatrix<f64>) -> FittedModel {
        let knots = KnotVector::new(vec![0.0, 2.0, 5.0, 9.0]).unwrap();
        let s = TransitionStructure::illness_death(vec!["x".into()]);
        let spec = ModelSpec::new(
            s,
            vec![
                Baseline::spline(knots),
                Baseline::Constant,
                Baseline::Constant,
            ],
            false,
        )
        .unwrap();
        let theta = ModelParams::from_vec(
            &spec,
            vec![-1.0, -0.8, -1.2, -1.5, 0.2, -2.5, 0.1, -2.0, -0.3],
        )
        .unwrap();
        let q = spec.n_params();
        assert_eq!(v.nrows(), q);
        FittedModel {
            spec,
            theta,
            v_theta: v,
            approximation_width: 1.0,
        }
    }

    #[test]
    fn zero_covariance_gives_degenerate_draws() {
        let th = DVector::from_vec(vec![1.0, -2.0]);
        let draws = draw_params(&th, &DMatrix::zeros(2, 2), 5, 3).unwrap();
        assert!(draws.iter().all(|d| *d == th));
    }

    #[test]
    fn draws_are_seeded() {
        let th = DVector::from_vec(vec![1.0, -2.0]);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        assert_eq!(
            draw_params(&th, &v, 50, 9).unwrap(),
            draw_params(&th, &v, 50, 9).unwrap()
        );
        assert_ne!(
            draw_params(&th, &v, 50, 9).unwrap(),
            draw_params(&th, &v, 50, 10).unwrap()
        );
    }

    #[test]
    fn draw_moments() {
        let th = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, -0.4, 0.0, -0.4, 0.5]);
        let n = 100_000;
        let draws = draw_params(&th, &v, n, 1).unwrap();
        let mean = draws.iter().fold(DVector::zeros(3), |a, d| a + d) / n as f64;
        for i in 0..3 {
            let se = (v[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - th[i]).abs() < 4.0 * se);
        }
        let cov = draws
            .iter()
            .map(|d| (d - &mean) * (d - &mean).transpose())
            .fold(DMatrix::zeros(3, 3), |a, m| a + m)
            / (n - 1) as f64;
        assert!((cov - &v).amax() < 0.05);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(draw_params(&DVector::zeros(2), &v, 3, 1).is_err());
    }

    #[test]
    fn constant_function_has_degenerate_interval() {
        let m = model(DMatrix::identity(9, 9) * 0.01);
        let e = ci_of_function(&m, &SimulationSettings::default(), |_| Ok(0.7)).unwrap();
        assert_eq!(e, Estimate::exact(0.7));
    }

    #[test]
    fn linear_function_matches_normal_theory() {
        let m = model(DMatrix::identity(9, 9));
        let grad = [0.5, -1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let settings = SimulationSettings {
            n_sims: 100_000,
            ..Default::default()
        };
        let e = ci_of_function(&m, &settings, |p| {
            Ok(p.theta.iter().zip(&grad).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let width = e.upper - e.lower;
        assert_relative_eq!(width, 2.0 * 1.959964 * norm, max_relative = 0.05);
    }

    #[test]
    fn matrix_prediction_properties() {
        let m = model(DMatrix::identity(9, 9) * 0.02);
        let settings = SimulationSettings {
            n_sims: 200,
            ..Default::default()
        };
        let p = predict_p(&m, 0.0, 5.0, &[1.0], 0.1, &settings).unwrap();
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| p[(r, c)].point).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-8);
            for c in 0..3 {
                assert!(p[(r, c)].lower <= p[(r, c)].upper);
            }
        }
        assert_eq!(p[(2, 2)], Estimate::exact(1.0));
        assert_eq!(p[(2, 0)], Estimate::exact(0.0));
        let id = predict_p(&m, 3.0, 3.0, &[1.0], 0.1, &settings).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(id[(r, c)], Estimate::exact(if r == c { 1.0 } else { 0.0 }));
            }
        }
    }

    #[test]
    fn hazard_curve_flat_at_zero_parameters() {
        let mut m = model(DMatrix::zeros(9, 9));
        m.theta = ModelParams::zeros(&m.spec);
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let curve = hazard_curve(
            &m,
            Transition::new(0, 1),
            &grid,
            &[0.0],
            &SimulationSettings::default(),
        )
        .unwrap();
        assert_eq!(curve.len(), 20);
        for c in &curve {
            assert_relative_eq!(c.estimate.point, 1.0, epsilon = 1e-12);
        }
        assert!(curve.last().unwrap().extrapolated);
        assert!(!curve[0].extrapolated);
    }

    #[test]
    fn request_validation() {
        let m = model(DMatrix::zeros(9, 9));
        let bad = SimulationSettings {
            n_sims: 1,
            ..Default::default()
        };
        assert!(predict_p(&m, 0.0, 1.0, &[0.0], 0.1, &bad).is_err());
        let s = SimulationSettings::default();
        assert!(predict_p(&m, 2.0, 1.0, &[0.0], 0.1, &s).is_err());
        assert!(predict_p(&m, 0.0, 1.0, &[], 0.1, &s).is_err());
        assert!(hazard_curve(&m, Transition::new(1, 0), &[1.0], &[0.0], &s).is_err());
        assert!(hazard_curve(&m, Transition::new(0, 1), &[1.0, 1.0], &[0.0], &s).is_err());
    }
}

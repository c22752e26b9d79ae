//! Interval-censored panel likelihood, its penalised version, the score and the
//! outer-product approximation to the Fisher information.
//!
//! Inference conditions on each individual's first observed state. Every pair of
//! successive observations contributes `log P_{y_{j-1} y_j}(t_{j-1}, t_j)` with
//! the generator frozen at `t_{j-1}` (or at each grid point when a grid is set),
//! except an exactly observed death which contributes
//! `log sum_s P_{y_{j-1} s}(t_{j-1}, t_j) q_{sD}(t_{j-1})`.
//!
//! Individuals are evaluated independently (in parallel) and reduced in a fixed
//! order: sorted by id, then by interval.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::markov::{Baseline, IntervalGradient, MarkovError, ModelParams, ModelSpec, Outcome};
use crate::splinebasis::PenaltyBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("invalid data for individual {id}: {reason}")]
    Data { id: String, reason: String },
    #[error("individual {id}: observed {from}->{to} on interval {interval} ({t0}, {t1}] has zero probability")]
    Impossible {
        id: String,
        interval: usize,
        from: usize,
        to: usize,
        t0: f64,
        t1: f64,
    },
    #[error("duplicate individual id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// One panel visit. `state` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub state: usize,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: String,
    pub observations: Vec<Observation>,
    /// The final observation is an exactly timed entry into the death state.
    pub death_exact: bool,
}

/// Validated panel data, individuals sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    individuals: Vec<Individual>,
    n_states: usize,
    n_covariates: usize,
}

fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

impl PanelDataset {
    /// Validates and sorts. The death state is the last state (`n_states - 1`);
    /// `death_exact` is cleared for individuals whose last state is not death.
    pub fn new(
        mut individuals: Vec<Individual>,
        n_states: usize,
        n_covariates: usize,
    ) -> Result<Self, LikelihoodError> {
        let death = n_states - 1;
        for ind in &mut individuals {
            let err = |reason: String| LikelihoodError::Data {
                id: ind.id.clone(),
                reason,
            };
            let obs = &ind.observations;
            if obs.len() < 2 {
                return Err(err(format!(
                    "{} observation(s); need at least 2",
                    obs.len()
                )));
            }
            for (j, o) in obs.iter().enumerate() {
                if !o.time.is_finite() {
                    return Err(err(format!("non-finite time at observation {}", j + 1)));
                }
                if o.state >= n_states {
                    return Err(err(format!(
                        "state {} outside 1..{n_states} at time {}",
                        o.state + 1,
                        o.time
                    )));
                }
                if o.state == death && j + 1 != obs.len() {
                    return Err(err(format!(
                        "death state {} observed before the final observation (time {})",
                        death + 1,
                        o.time
                    )));
                }
                if o.covariates.len() != n_covariates {
                    return Err(err(format!(
                        "{} covariate values, expected {n_covariates}",
                        o.covariates.len()
                    )));
                }
                if o.covariates.iter().any(|v| !v.is_finite()) {
                    return Err(err(format!("non-finite covariate at time {}", o.time)));
                }
            }
            if let Some(w) = obs.windows(2).find(|w| w[1].time <= w[0].time) {
                return Err(err(format!(
                    "times not strictly increasing ({} then {})",
                    w[0].time, w[1].time
                )));
            }
            if obs.last().map(|o| o.state) != Some(death) {
                ind.death_exact = false;
            }
        }
        individuals.sort_by(|a, b| id_order(&a.id, &b.id));
        if let Some(w) = individuals.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(LikelihoodError::DuplicateId(w[0].id.clone()));
        }
        Ok(Self {
            individuals,
            n_states,
            n_covariates,
        })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.individuals.iter().map(|i| i.observations.len()).sum()
    }

    /// Every observation time, in dataset order.
    pub fn all_times(&self) -> Vec<f64> {
        self.individuals
            .iter()
            .flat_map(|i| i.observations.iter().map(|o| o.time))
            .collect()
    }

    /// Median time between successive observations of the same individual.
    pub fn median_gap(&self) -> f64 {
        let mut gaps: Vec<f64> = self
            .individuals
            .iter()
            .flat_map(|i| i.observations.windows(2).map(|w| w[1].time - w[0].time))
            .collect();
        gaps.sort_by(f64::total_cmp);
        crate::quantile_type7(&gaps, 0.5)
    }

    /// Counts of successive state pairs, `table[from][to]`.
    pub fn pair_table(&self) -> Vec<Vec<usize>> {
        let d = self.n_states;
        let mut t = vec![vec![0usize; d]; d];
        for ind in &self.individuals {
            for w in ind.observations.windows(2) {
                t[w[0].state][w[1].state] += 1;
            }
        }
        t
    }

    /// A dataset holding the given subset of individuals (by position).
    pub fn subset(&self, keep: impl Fn(usize, &Individual) -> bool) -> Self {
        Self {
            individuals: self
                .individuals
                .iter()
                .enumerate()
                .filter(|(i, ind)| keep(*i, ind))
                .map(|(_, ind)| ind.clone())
                .collect(),
            n_states: self.n_states,
            n_covariates: self.n_covariates,
        }
    }
}

/// Options of the likelihood approximation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LikelihoodOptions {
    /// Fixed grid width for the piecewise-constant approximation; `None` uses
    /// the individual observation intervals.
    pub grid_width: Option<f64>,
}

/// Penalty blocks `S_rs` and smoothing parameters, one per spline transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: Vec<f64>,
    pub blocks: Vec<PenaltyBlock>,
    /// Parameter ranges of each block in the flattened `theta`.
    pub ranges: Vec<std::ops::Range<usize>>,
    pub transitions: Vec<usize>,
    n_params: usize,
}

impl PenaltyConfig {
    pub fn new(spec: &ModelSpec, lambda: Vec<f64>) -> Self {
        let transitions = spec.spline_transitions();
        assert_eq!(
            lambda.len(),
            transitions.len(),
            "one smoothing parameter per spline transition"
        );
        assert!(
            lambda.iter().all(|l| *l >= 0.0),
            "smoothing parameters must be >= 0"
        );
        let mut blocks = Vec::new();
        let mut ranges = Vec::new();
        for &ti in &transitions {
            if let Baseline::Spline(basis) = &spec.baselines()[ti] {
                blocks.push(basis.penalty_matrix());
                ranges.push(spec.alpha_range(ti));
            }
        }
        Self {
            lambda,
            blocks,
            ranges,
            transitions,
            n_params: spec.n_params(),
        }
    }

    pub fn with_lambda(&self, lambda: &[f64]) -> Self {
        Self {
            lambda: lambda.to_vec(),
            ..self.clone()
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block-diagonal `S_lambda` (zeros on unpenalised rows and columns).
    pub fn s_lambda(&self) -> DMatrix<f64> {
        self.s_weighted(&self.lambda)
    }

    pub fn s_weighted(&self, lambda: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n_params, self.n_params);
        for ((block, range), &l) in self.blocks.iter().zip(&self.ranges).zip(lambda) {
            let mut view = s.view_mut((range.start, range.start), (range.len(), range.len()));
            view += &block.matrix * l;
        }
        s
    }

    /// Stacked square root `E` ((sum of K-2) x q) with `E'E = S_lambda` for
    /// the given smoothing parameters.
    pub fn root_weighted(&self, lambda: &[f64]) -> DMatrix<f64> {
        let rows = self.blocks.iter().map(|b| b.factor.nrows()).sum();
        let mut e = DMatrix::zeros(rows, self.n_params);
        let mut r0 = 0;
        for ((block, range), &l) in self.blocks.iter().zip(&self.ranges).zip(lambda) {
            let f = &block.factor;
            let mut view = e.view_mut((r0, range.start), (f.nrows(), f.ncols()));
            view += f * l.sqrt();
            r0 += f.nrows();
        }
        e
    }

    /// Single block `S_rs` embedded in a q x q matrix.
    pub fn s_block(&self, b: usize) -> DMatrix<f64> {
        let mut w = vec![0.0; self.n_blocks()];
        w[b] = 1.0;
        self.s_weighted(&w)
    }

    /// `S_lambda theta`, accumulated blockwise.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(theta.len());
        for ((block, range), l) in self.blocks.iter().zip(&self.ranges).zip(&self.lambda) {
            let part = block.apply(&theta.as_slice()[range.clone()]) * *l;
            out.rows_mut(range.start, range.len()).copy_from(&part);
        }
        out
    }

    /// `theta' S_lambda theta`, accumulated blockwise.
    pub fn quad_form(&self, theta: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .zip(&self.ranges)
            .zip(&self.lambda)
            .map(|((block, range), l)| l * block.quad_form(&theta.as_slice()[range.clone()]))
            .sum()
    }
}

/// Log-likelihood with optional score and Fisher approximation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: Option<DVector<f64>>,
    pub fisher: Option<DMatrix<f64>>,
    pub n_intervals: usize,
}

/// What [`evaluate`] should compute beyond the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    LogLik,
    Score,
    ScoreAndFisher,
}

/// Log-likelihood contribution of one observed interval.
#[allow(clippy::too_many_arguments)]
pub fn interval_contribution(
    spec: &ModelSpec,
    params: &ModelParams,
    from: (f64, usize, &[f64]),
    to: (f64, usize),
    death_exact: bool,
    options: &LikelihoodOptions,
) -> Result<f64, MarkovError> {
    let outcome = outcome_for(spec, to.1, death_exact);
    let ig = IntervalGradient::compute(
        spec,
        params,
        from.0,
        to.0,
        from.1,
        from.2,
        outcome,
        options.grid_width,
        false,
    )?;
    Ok(ig.log_likelihood)
}

fn outcome_for(spec: &ModelSpec, to: usize, death_exact: bool) -> Outcome {
    if death_exact && to == spec.structure().death_state() {
        Outcome::ExactDeath
    } else {
        Outcome::State(to)
    }
}

struct Partial {
    loglik: f64,
    score: Option<DVector<f64>>,
    fisher: Option<DMatrix<f64>>,
    n_intervals: usize,
}

fn eval_individual(
    spec: &ModelSpec,
    params: &ModelParams,
    ind: &Individual,
    options: &LikelihoodOptions,
    want: Want,
) -> Result<Partial, LikelihoodError> {
    let q = spec.n_params();
    let with_gradient = want != Want::LogLik;
    let mut out = Partial {
        loglik: 0.0,
        score: with_gradient.then(|| DVector::zeros(q)),
        fisher: (want == Want::ScoreAndFisher).then(|| DMatrix::zeros(q, q)),
        n_intervals: 0,
    };
    let obs = &ind.observations;
    let last = obs.len() - 1;
    for (j, w) in obs.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if spec.structure().is_absorbing(a.state) {
            if b.state == a.state {
                continue;
            }
            return Err(LikelihoodError::Data {
                id: ind.id.clone(),
                reason: format!("observed leaving absorbing state {}", a.state + 1),
            });
        }
        let outcome = outcome_for(spec, b.state, ind.death_exact && j + 1 == last);
        let ig = IntervalGradient::compute(
            spec,
            params,
            a.time,
            b.time,
            a.state,
            &a.covariates,
            outcome,
            options.grid_width,
            with_gradient,
        )?;
        if !(ig.likelihood > 0.0) {
            return Err(LikelihoodError::Impossible {
                id: ind.id.clone(),
                interval: j + 1,
                from: a.state + 1,
                to: b.state + 1,
                t0: a.time,
                t1: b.time,
            });
        }
        out.loglik += ig.log_likelihood;
        out.n_intervals += 1;
        if let Some(s) = out.score.as_mut() {
            *s += &ig.gradient;
        }
        if let Some(m) = out.fisher.as_mut() {
            m.syger(1.0, &ig.gradient, &ig.gradient, 1.0);
        }
    }
    Ok(out)
}

/// Evaluates the log-likelihood and, on request, the score and the
/// outer-product Fisher approximation `M`.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &PanelDataset,
    options: &LikelihoodOptions,
    want: Want,
) -> Result<Evaluation, LikelihoodError> {
    let parts: Vec<Partial> = data
        .individuals()
        .par_iter()
        .map(|ind| eval_individual(spec, params, ind, options, want))
        .collect::<Result<_, _>>()?;
    let q = spec.n_params();
    let mut eval = Evaluation {
        loglik: 0.0,
        score: (want != Want::LogLik).then(|| DVector::zeros(q)),
        fisher: (want == Want::ScoreAndFisher).then(|| DMatrix::zeros(q, q)),
        n_intervals: 0,
    };
    for p in parts {
        eval.loglik += p.loglik;
        eval.n_intervals += p.n_intervals;
        if let (Some(acc), Some(s)) = (eval.score.as_mut(), p.score) {
            *acc += s;
        }
        if let (Some(acc), Some(m)) = (eval.fisher.as_mut(), p.fisher) {
            *acc += m;
        }
    }
    if let Some(m) = eval.fisher.as_mut() {
        m.fill_upper_triangle_with_lower_triangle();
    }
    Ok(eval)
}

pub fn loglik(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &PanelDataset,
    options: &LikelihoodOptions,
) -> Result<f64, LikelihoodError> {
    Ok(evaluate(spec, params, data, options, Want::LogLik)?.loglik)
}

/// `loglik - 0.5 theta' S_lambda theta`.
pub fn pen_loglik(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &PanelDataset,
    options: &LikelihoodOptions,
    penalty: &PenaltyConfig,
) -> Result<f64, LikelihoodError> {
    Ok(loglik(spec, params, data, options)? - 0.5 * penalty.quad_form(&params.theta))
}

pub fn score(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &PanelDataset,
    options: &LikelihoodOptions,
) -> Result<DVector<f64>, LikelihoodError> {
    Ok(evaluate(spec, params, data, options, Want::Score)?
        .score
        .expect("score requested"))
}

pub fn fisher_approx(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &PanelDataset,
    options: &LikelihoodOptions,
) -> Result<DMatrix<f64>, LikelihoodError> {
    Ok(evaluate(spec, params, data, options, Want::ScoreAndFisher)?
        .fisher
        .expect("fisher requested"))
}

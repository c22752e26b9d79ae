//! Penalised maximum likelihood with automatic smoothing-parameter selection.
//!
//! For fixed `lambda`, `theta` is updated by Fisher scoring in working-response
//! form:
//!
//! ```text
//! theta' = (M + S_lambda)^{-1} sqrt(M) z,   z = sqrt(M) theta + sqrt(M)^{-1} g
//! ```
//!
//! where `g` is the score and `M` the outer-product information. Given the
//! working quantities at the fitted `theta`, `lambda` minimises the UBRE score
//! `||z - A z||^2 - q + 2 tr(A)` with `A = sqrt(M) (M + S_lambda)^{-1} sqrt(M)`.
//! The two steps alternate until `theta` stops moving.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use log::{debug, trace, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{
    evaluate, LikelihoodError, LikelihoodOptions, PanelDataset, PenaltyConfig, Want,
};
use crate::markov::{Baseline, ModelParams, ModelSpec, TransitionStructure};
use crate::splinebasis::place_knots;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("numerical failure: {reason} (theta = {theta:?})")]
    Numerical { reason: String, theta: Vec<f64> },
    #[error("invalid fitting options: {0}")]
    Options(String),
}

/// Relative eigenvalue floor used for square roots and inverses of `M`.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Relative gain in the penalised log-likelihood treated as round-off.
pub const ROUNDOFF_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Convergence threshold on `max |theta change|` (inner and outer).
    pub delta: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_halvings: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Starting smoothing parameters (default 1 per spline block).
    pub lambda_init: Option<Vec<f64>>,
    /// Hold `lambda` at its starting value (no UBRE selection).
    pub fix_lambda: bool,
    pub simplex_max_iter: u64,
    /// Use `(M + S_lambda)^{-1}` instead of `M^{-1}` for `V_theta`.
    pub penalized_covariance: bool,
    /// Step-halving accepts a candidate whose penalised log-likelihood is at
    /// least `current - ascent_slack * (1 + |current|)`.
    pub ascent_slack: f64,
    /// Halve the `log lambda` step of a block each time its direction reverses.
    pub damp_lambda: bool,
    #[serde(skip)]
    pub likelihood: LikelihoodOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            max_outer: 200,
            max_inner: 100,
            max_halvings: 30,
            lambda_min: 1e-8,
            lambda_max: 1e12,
            lambda_init: None,
            fix_lambda: false,
            simplex_max_iter: 200,
            penalized_covariance: false,
            ascent_slack: 0.0,
            damp_lambda: false,
            likelihood: LikelihoodOptions::default(),
        }
    }
}

/// Quantities of one scoring step at a given `theta`.
#[derive(Debug, Clone)]
pub struct WorkingQuantities {
    pub theta: DVector<f64>,
    pub g: DVector<f64>,
    /// Raw outer-product information `M(theta)`.
    pub fisher: DMatrix<f64>,
    /// `M` with eigenvalues raised to the floor; equals `sqrt_i * sqrt_i`.
    pub fisher_floored: DMatrix<f64>,
    pub sqrt_i: DMatrix<f64>,
    pub sqrt_i_inv: DMatrix<f64>,
    pub eps: DVector<f64>,
    pub z: DVector<f64>,
}

/// Eigenvectors and floored eigenvalues of a symmetric matrix.
fn floored_eigen(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return None;
    }
    let floor = max * EIGEN_FLOOR;
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    Some((eig.eigenvectors, vals))
}

fn recompose(vectors: &DMatrix<f64>, vals: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= vals[j];
    }
    let out = scaled * vectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Inverse of a symmetric PSD matrix after raising small eigenvalues to
/// `max_eigenvalue * 1e-10`.
pub fn floored_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (v, vals) = floored_eigen(m)?;
    Some(recompose(&v, &vals.map(|x| 1.0 / x)))
}

impl WorkingQuantities {
    pub fn new(
        theta: DVector<f64>,
        g: DVector<f64>,
        fisher: DMatrix<f64>,
    ) -> Result<Self, EstimationError> {
        let numerical = |reason: &str| EstimationError::Numerical {
            reason: reason.into(),
            theta: theta.iter().copied().collect(),
        };
        if g.iter().any(|v| !v.is_finite()) || fisher.iter().any(|v| !v.is_finite()) {
            return Err(numerical("non-finite score or information"));
        }
        let (vectors, vals) =
            floored_eigen(&fisher).ok_or_else(|| numerical("information matrix is zero"))?;
        let sqrt_i = recompose(&vectors, &vals.map(f64::sqrt));
        let sqrt_i_inv = recompose(&vectors, &vals.map(|v| 1.0 / v.sqrt()));
        let fisher_floored = recompose(&vectors, &vals);
        let eps = &sqrt_i_inv * &g;
        let z = &sqrt_i * &theta + &eps;
        Ok(Self {
            theta,
            g,
            fisher,
            fisher_floored,
            sqrt_i,
            sqrt_i_inv,
            eps,
            z,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Upper-triangular `R` with `R'R = M + E'E`, from a QR decomposition of
    /// the stacked matrix `[sqrt(M); E]`. Squaring is avoided, which matters
    /// when large smoothing parameters make `M + S` badly conditioned.
    fn factor(&self, root: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let q = self.dim();
        let mut stacked = DMatrix::zeros(q + root.nrows(), q);
        stacked.rows_mut(0, q).copy_from(&self.sqrt_i);
        stacked.rows_mut(q, root.nrows()).copy_from(root);
        let r = stacked.qr().r();
        let scale = r.diagonal().amax();
        (scale > 0.0 && r.diagonal().iter().all(|d| d.abs() > scale * 1e-15)).then_some(r)
    }

    /// `W = R^{-T} sqrt(M)`, so that the influence matrix is `W'W`.
    fn half_influence(&self, root: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let r = self.factor(root)?;
        r.transpose().solve_lower_triangular(&self.sqrt_i)
    }

    /// Influence matrix `A = sqrt(M) (M + S)^{-1} sqrt(M)` where `S = E'E`.
    pub fn influence(&self, root: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let w = self.half_influence(root)?;
        Some(w.tr_mul(&w))
    }

    /// Full scoring update `(M + S)^{-1} sqrt(M) z`: the least-squares
    /// solution of `[sqrt(M); E] theta ~ [z; 0]`.
    pub fn update(&self, root: &DMatrix<f64>) -> Option<DVector<f64>> {
        let q = self.dim();
        let mut stacked = DMatrix::zeros(q + root.nrows(), q);
        stacked.rows_mut(0, q).copy_from(&self.sqrt_i);
        stacked.rows_mut(q, root.nrows()).copy_from(root);
        let mut y = DVector::zeros(q + root.nrows());
        y.rows_mut(0, q).copy_from(&self.z);
        let qr = stacked.qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if !(scale > 0.0) || r.diagonal().iter().any(|d| d.abs() <= scale * 1e-15) {
            return None;
        }
        let qty = qr.q().tr_mul(&y);
        r.solve_upper_triangular(&qty)
    }

    /// `(M + S)^{-1}` for the floored `M`.
    pub fn penalised_inverse(&self, root: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let r = self.factor(root)?;
        let rinv = r.solve_upper_triangular(&DMatrix::identity(self.dim(), self.dim()))?;
        let out = &rinv * rinv.transpose();
        Some((&out + out.transpose()) * 0.5)
    }
}

/// UBRE score with `c = dim(z)`; infinite when the system is singular.
pub fn ubre(lambda: &[f64], working: &WorkingQuantities, penalty: &PenaltyConfig) -> f64 {
    let Some(w) = working.half_influence(&penalty.root_weighted(lambda)) else {
        return f64::INFINITY;
    };
    let az = w.tr_mul(&(&w * &working.z));
    (&working.z - az).norm_squared() - working.dim() as f64 + 2.0 * w.norm_squared()
}

/// Per-block sums of `diag(A)` and the total `tr(A)`.
pub fn effective_df(
    lambda: &[f64],
    working: &WorkingQuantities,
    penalty: &PenaltyConfig,
) -> Option<(Vec<f64>, f64)> {
    let a = working.influence(&penalty.root_weighted(lambda))?;
    let blocks = penalty
        .ranges
        .iter()
        .map(|r| r.clone().map(|i| a[(i, i)]).sum())
        .collect();
    Some((blocks, a.trace()))
}

/// Result of one scoring step.
#[derive(Debug, Clone)]
pub struct ScoringStep {
    pub theta_next: DVector<f64>,
    pub working: WorkingQuantities,
    pub pen_loglik: f64,
    pub pen_loglik_next: f64,
    pub halvings: usize,
    /// No step size improved the penalised log-likelihood; `theta_next == theta`.
    pub stalled: bool,
    /// `max |full step|` before any halving.
    pub full_step: f64,
}

fn pen_loglik_at(
    spec: &ModelSpec,
    theta: &DVector<f64>,
    penalty: &PenaltyConfig,
    data: &PanelDataset,
    options: &LikelihoodOptions,
) -> Option<f64> {
    let params = ModelParams {
        theta: theta.clone(),
    };
    let ll = evaluate(spec, &params, data, options, Want::LogLik)
        .ok()?
        .loglik;
    let v = ll - 0.5 * penalty.quad_form(theta);
    v.is_finite().then_some(v)
}

/// One Fisher-scoring update with step halving.
pub fn scoring_step(
    spec: &ModelSpec,
    theta: &DVector<f64>,
    penalty: &PenaltyConfig,
    data: &PanelDataset,
    options: &FitOptions,
) -> Result<ScoringStep, EstimationError> {
    let params = ModelParams {
        theta: theta.clone(),
    };
    let eval = evaluate(
        spec,
        &params,
        data,
        &options.likelihood,
        Want::ScoreAndFisher,
    )?;
    let current = eval.loglik - 0.5 * penalty.quad_form(theta);
    let working = WorkingQuantities::new(
        theta.clone(),
        eval.score.expect("score requested"),
        eval.fisher.expect("fisher requested"),
    )?;
    let proposal = working
        .update(&penalty.root_weighted(&penalty.lambda))
        .ok_or_else(|| EstimationError::Numerical {
            reason: "M + S_lambda is singular".into(),
            theta: theta.iter().copied().collect(),
        })?;
    let step = &proposal - theta;
    let full_step = step.amax();
    let slack = options.ascent_slack * (1.0 + current.abs());
    let mut scale = 1.0;
    for halvings in 0..=options.max_halvings {
        let candidate = theta + &step * scale;
        if let Some(value) = pen_loglik_at(spec, &candidate, penalty, data, &options.likelihood) {
            if value >= current - slack {
                return Ok(ScoringStep {
                    theta_next: candidate,
                    working,
                    pen_loglik: current,
                    pen_loglik_next: value,
                    halvings,
                    stalled: false,
                    full_step,
                });
            }
        }
        scale *= 0.5;
    }
    Ok(ScoringStep {
        theta_next: theta.clone(),
        working,
        pen_loglik: current,
        pen_loglik_next: current,
        halvings: options.max_halvings,
        stalled: true,
        full_step,
    })
}

#[derive(Debug, Clone)]
pub struct InnerFit {
    pub theta: DVector<f64>,
    pub converged: bool,
    pub stalled: bool,
    pub iterations: usize,
    pub pen_loglik: f64,
}

/// Scoring iterations for fixed `lambda` until `max |theta change| < delta`,
/// or until a halved step gains no more than round-off.
pub fn fit_theta(
    spec: &ModelSpec,
    penalty: &PenaltyConfig,
    theta0: &DVector<f64>,
    data: &PanelDataset,
    options: &FitOptions,
) -> Result<InnerFit, EstimationError> {
    let mut theta = theta0.clone();
    let mut pen_loglik = f64::NEG_INFINITY;
    for it in 1..=options.max_inner {
        let step = scoring_step(spec, &theta, penalty, data, options)?;
        let gain = step.pen_loglik_next - step.pen_loglik;
        if step.halvings > 0 && gain <= ROUNDOFF_GAIN * (1.0 + step.pen_loglik.abs()) {
            // the full step failed and the halved one only gains round-off:
            // theta is as good as the likelihood can resolve, so keep it
            trace!("inner {it}: gain {gain:.3e} at round-off, stopping");
            return Ok(InnerFit {
                theta,
                converged: true,
                stalled: false,
                iterations: it,
                pen_loglik: step.pen_loglik,
            });
        }
        let change = (&step.theta_next - &theta).amax();
        trace!(
            "inner {it}: pen_loglik {:.10} change {change:.3e} halvings {}",
            step.pen_loglik_next,
            step.halvings
        );
        theta = step.theta_next;
        pen_loglik = step.pen_loglik_next;
        if step.stalled {
            // no ascent possible: converged only if the full step was already negligible
            return Ok(InnerFit {
                theta,
                converged: step.full_step < options.delta,
                stalled: true,
                iterations: it,
                pen_loglik,
            });
        }
        if change < options.delta {
            return Ok(InnerFit {
                theta,
                converged: true,
                stalled: false,
                iterations: it,
                pen_loglik,
            });
        }
    }
    Ok(InnerFit {
        theta,
        converged: false,
        stalled: false,
        iterations: options.max_inner,
        pen_loglik,
    })
}

struct UbreCost<'a> {
    working: &'a WorkingQuantities,
    penalty: &'a PenaltyConfig,
    log_min: f64,
    log_max: f64,
}

impl UbreCost<'_> {
    fn lambda(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter()
            .map(|r| r.clamp(self.log_min, self.log_max).exp())
            .collect()
    }
}

impl CostFunction for UbreCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, rho: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(ubre(&self.lambda(rho), self.working, self.penalty))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaUpdate {
    pub lambda: Vec<f64>,
    pub ubre: f64,
    pub iterations: u64,
    pub warning: Option<String>,
}

/// Minimises UBRE over `log lambda` with a Nelder-Mead simplex started at
/// `log lambda_init` (unit steps), clamping `lambda` to the configured range.
pub fn optimize_lambda(
    working: &WorkingQuantities,
    penalty: &PenaltyConfig,
    lambda_init: &[f64],
    options: &FitOptions,
) -> LambdaUpdate {
    let cost = UbreCost {
        working,
        penalty,
        log_min: options.lambda_min.ln(),
        log_max: options.lambda_max.ln(),
    };
    let rho0: Vec<f64> = lambda_init
        .iter()
        .map(|l| l.max(options.lambda_min).min(options.lambda_max).ln())
        .collect();
    let start_value = ubre(&cost.lambda(&rho0), working, penalty);
    let keep = |warning: String| LambdaUpdate {
        lambda: cost.lambda(&rho0),
        ubre: start_value,
        iterations: 0,
        warning: Some(warning),
    };
    if rho0.is_empty() {
        return LambdaUpdate {
            lambda: vec![],
            ubre: start_value,
            iterations: 0,
            warning: None,
        };
    }
    let mut simplex = vec![rho0.clone()];
    for i in 0..rho0.len() {
        let mut v = rho0.clone();
        v[i] += 1.0;
        simplex.push(v);
    }
    let solver = match NelderMead::new(simplex).with_sd_tolerance(0.0) {
        Ok(s) => s,
        Err(e) => return keep(format!("simplex setup failed: {e}")),
    };
    let result = Executor::new(
        UbreCost {
            working,
            penalty,
            log_min: cost.log_min,
            log_max: cost.log_max,
        },
        solver,
    )
    .configure(|st| st.max_iters(options.simplex_max_iter))
    .run();
    match result {
        Ok(res) => {
            let state = res.state();
            let Some(best) = state.get_best_param() else {
                return keep("simplex returned no parameter".into());
            };
            let value = state.get_best_cost();
            if !(value <= start_value) {
                return keep(format!("simplex did not improve UBRE ({value})"));
            }
            LambdaUpdate {
                lambda: cost.lambda(best),
                ubre: value,
                iterations: state.get_iter(),
                warning: None,
            }
        }
        Err(e) => keep(format!("simplex failed: {e}")),
    }
}

/// Crude starting values: `beta = 0`; each alpha block constant at the log of
/// (observed r->s pairs / time at risk in r), with zero counts replaced by 0.5.
pub fn initial_theta(spec: &ModelSpec, data: &PanelDataset) -> DVector<f64> {
    let d = spec.n_states();
    let mut counts = vec![vec![0.0f64; d]; d];
    let mut exposure = vec![0.0f64; d];
    for ind in data.individuals() {
        for w in ind.observations.windows(2) {
            exposure[w[0].state] += w[1].time - w[0].time;
            counts[w[0].state][w[1].state] += 1.0;
        }
    }
    let mut theta = DVector::zeros(spec.n_params());
    for (ti, tr) in spec.structure().transitions().iter().enumerate() {
        let c = counts[tr.from][tr.to];
        let c = if c > 0.0 { c } else { 0.5 };
        let e = if exposure[tr.from] > 0.0 {
            exposure[tr.from]
        } else {
            1.0
        };
        let log_rate = (c / e).ln();
        for k in spec.alpha_range(ti) {
            theta[k] = log_rate;
        }
    }
    theta
}

/// Spline baselines for every transition with `k` knots at quantiles of all
/// observation times in `data`.
pub fn quantile_knot_spec(
    structure: TransitionStructure,
    data: &PanelDataset,
    k: usize,
    share_beta: bool,
) -> Result<ModelSpec, EstimationError> {
    let times = data.all_times();
    let baselines = structure
        .transitions()
        .iter()
        .map(|tr| {
            place_knots(&times, k, &tr.to_string())
                .map(Baseline::spline)
                .map_err(|e| EstimationError::Options(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ModelSpec::new(structure, baselines, share_beta)
        .map_err(|e| EstimationError::Options(e.to_string()))
}

/// One row of the outer-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub inner_iterations: usize,
    pub pen_loglik: f64,
    pub ubre: f64,
    pub max_change: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: ModelParams,
    pub lambda_hat: Vec<f64>,
    pub v_theta: DMatrix<f64>,
    pub edf_blocks: Vec<f64>,
    pub edf_total: f64,
    pub converged: bool,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub loglik: f64,
    pub pen_loglik: f64,
    pub ubre: f64,
    pub score: DVector<f64>,
    pub trace: Vec<TraceRow>,
    pub warnings: Vec<String>,
    pub likelihood: LikelihoodOptions,
    /// Span over which the fit held hazards constant: the likelihood grid
    /// width, or the median observation gap without a grid.
    pub approximation_width: f64,
}

impl FitResult {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.v_theta.nrows())
            .map(|i| self.v_theta[(i, i)].max(0.0).sqrt())
            .collect()
    }

    pub fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig::new(&self.spec, self.lambda_hat.clone())
    }

    /// `max |g - S_lambda theta|`, the penalised first-order residual.
    pub fn penalised_gradient_norm(&self) -> f64 {
        (&self.score - self.penalty().apply(&self.theta_hat.theta)).amax()
    }
}

fn working_at(
    spec: &ModelSpec,
    theta: &DVector<f64>,
    data: &PanelDataset,
    options: &FitOptions,
) -> Result<(f64, WorkingQuantities), EstimationError> {
    let params = ModelParams {
        theta: theta.clone(),
    };
    let eval = evaluate(
        spec,
        &params,
        data,
        &options.likelihood,
        Want::ScoreAndFisher,
    )?;
    let w = WorkingQuantities::new(
        theta.clone(),
        eval.score.expect("score requested"),
        eval.fisher.expect("fisher requested"),
    )?;
    Ok((eval.loglik, w))
}

/// Alternates penalised scoring for `theta` and UBRE minimisation for `lambda`.
///
const MIN_DAMPING: f64 = 1.0 / 32.0;

/// Non-convergence is reported in the result, not as an error.
pub fn fit(
    spec: &ModelSpec,
    data: &PanelDataset,
    options: &FitOptions,
) -> Result<FitResult, EstimationError> {
    let n_blocks = spec.spline_transitions().len();
    let mut lambda = match &options.lambda_init {
        Some(l) if l.len() == n_blocks => l.clone(),
        Some(l) => {
            return Err(EstimationError::Options(format!(
                "{} starting smoothing parameters for {n_blocks} spline transitions",
                l.len()
            )))
        }
        None => vec![1.0; n_blocks],
    };
    let base_penalty = PenaltyConfig::new(spec, lambda.clone());
    let mut theta = initial_theta(spec, data);
    let mut previous: Option<DVector<f64>> = None;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut inner_total = 0;
    let mut outer = 0;
    let mut damping = vec![1.0f64; n_blocks];
    let mut last_step = vec![0.0; n_blocks];
    let mut loglik;
    let mut working;

    loop {
        outer += 1;
        let penalty = base_penalty.with_lambda(&lambda);
        let inner = fit_theta(spec, &penalty, &theta, data, options)?;
        inner_total += inner.iterations;
        if !inner.converged {
            warnings.push(format!(
                "outer iteration {outer}: inner scoring {} after {} iterations",
                if inner.stalled {
                    "stalled"
                } else {
                    "hit the cap"
                },
                inner.iterations
            ));
        }
        theta = inner.theta;
        (loglik, working) = working_at(spec, &theta, data, options)?;
        let max_change = previous
            .as_ref()
            .map(|p| (&theta - p).amax())
            .unwrap_or(f64::INFINITY);
        let row = TraceRow {
            outer,
            inner_iterations: inner.iterations,
            pen_loglik: inner.pen_loglik,
            ubre: ubre(&lambda, &working, &penalty),
            max_change,
            lambda: lambda.clone(),
        };
        debug!(
            "outer {} inner {} pen_loglik {:.6} ubre {:.6} change {:.3e} lambda {:?}",
            row.outer, row.inner_iterations, row.pen_loglik, row.ubre, row.max_change, row.lambda
        );
        trace.push(row);

        if n_blocks == 0 || options.fix_lambda {
            converged = inner.converged;
            break;
        }
        if max_change < options.delta && inner.converged {
            converged = true;
            break;
        }
        if outer >= options.max_outer {
            warnings.push(format!(
                "outer loop hit the cap of {} iterations",
                options.max_outer
            ));
            break;
        }
        let update = optimize_lambda(&working, &penalty, &lambda, options);
        if let Some(w) = update.warning {
            warn!("outer iteration {outer}: {w}");
            warnings.push(format!("outer iteration {outer}: {w}"));
        }
        let mut next = update.lambda;
        if options.damp_lambda {
            for b in 0..n_blocks {
                let step = next[b].ln() - lambda[b].ln();
                if step * last_step[b] < 0.0 {
                    damping[b] = (damping[b] * 0.5).max(MIN_DAMPING);
                }
                let applied = damping[b] * step;
                next[b] = (lambda[b].ln() + applied)
                    .exp()
                    .clamp(options.lambda_min, options.lambda_max);
                last_step[b] = applied;
            }
        }
        lambda = next;
        previous = Some(theta.clone());
    }

    let penalty = base_penalty.with_lambda(&lambda);
    let v_theta = if options.penalized_covariance {
        working.penalised_inverse(&penalty.root_weighted(&lambda))
    } else {
        floored_inverse(&working.fisher)
    }
    .ok_or_else(|| EstimationError::Numerical {
        reason: "covariance matrix is singular".into(),
        theta: theta.iter().copied().collect(),
    })?;
    let (edf_blocks, edf_total) =
        effective_df(&lambda, &working, &penalty).unwrap_or((vec![f64::NAN; n_blocks], f64::NAN));
    let pen_loglik = loglik - 0.5 * penalty.quad_form(&theta);
    Ok(FitResult {
        spec: spec.clone(),
        theta_hat: ModelParams {
            theta: theta.clone(),
        },
        ubre: ubre(&lambda, &working, &penalty),
        lambda_hat: lambda,
        v_theta,
        edf_blocks,
        edf_total,
        converged,
        iterations: outer,
        inner_iterations: inner_total,
        loglik,
        pen_loglik,
        score: working.g.clone(),
        trace,
        warnings,
        likelihood: options.likelihood,
        approximation_width: options
            .likelihood
            .grid_width
            .unwrap_or_else(|| data.median_gap()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::Transition;
    use crate::splinebasis::KnotVector;
    use approx::assert_relative_eq;

    fn spd(q: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(q + 3, q, |_, _| rng.random::<f64>() - 0.5);
        x.transpose() * x + DMatrix::identity(q, q) * 0.1
    }

    fn one_block_penalty(k: usize) -> (ModelSpec, PenaltyConfig) {
        let knots = KnotVector::new((0..k).map(|i| i as f64 * 1.5).collect()).unwrap();
        let s = TransitionStructure::new(2, [Transition::new(0, 1)], vec!["x".into()]).unwrap();
        let spec = ModelSpec::new(s, vec![Baseline::spline(knots)], false).unwrap();
        let pen = PenaltyConfig::new(&spec, vec![1.0]);
        (spec, pen)
    }

    #[test]
    fn sqrt_squares_back() {
        let m = spd(6, 1);
        let w = WorkingQuantities::new(DVector::zeros(6), DVector::zeros(6), m.clone()).unwrap();
        assert_relative_eq!(
            &w.sqrt_i * &w.sqrt_i,
            m,
            max_relative = 1e-8,
            epsilon = 1e-12
        );
    }

    #[test]
    fn newton_exact_on_quadratic() {
        // l(theta) = -1/2 (theta - t*)' M (theta - t*): g = M (t* - theta)
        let m = spd(5, 2);
        let target = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5, -0.2]);
        let theta = DVector::from_vec(vec![1.0, 1.0, -1.0, 0.0, 0.4]);
        let g = &m * (&target - &theta);
        let w = WorkingQuantities::new(theta, g, m).unwrap();
        let next = w.update(&DMatrix::zeros(0, 5)).unwrap();
        assert_relative_eq!(next, target, epsilon = 1e-10);
    }

    #[test]
    fn fixed_point_at_penalised_optimum() {
        let (_, pen) = one_block_penalty(5);
        let pen = pen.with_lambda(&[3.0]);
        let m = spd(6, 4);
        let theta = DVector::from_vec(vec![0.2, -0.1, 0.4, 0.3, -0.6, 1.1]);
        // g_p = 0  <=>  g = S theta
        let g = pen.s_lambda() * &theta;
        let w = WorkingQuantities::new(theta.clone(), g, m).unwrap();
        let next = w.update(&pen.root_weighted(&pen.lambda)).unwrap();
        assert_relative_eq!(next, theta, epsilon = 1e-8);
    }

    #[test]
    fn ubre_limits_and_dense_oracle() {
        let (_, pen) = one_block_penalty(5);
        let m = spd(6, 5);
        let theta = DVector::from_vec(vec![0.5, -0.3, 0.1, 0.9, -0.4, 0.2]);
        let g = DVector::from_vec(vec![0.1, 0.4, -0.2, 0.05, 0.3, -0.6]);
        let w = WorkingQuantities::new(theta, g, m.clone()).unwrap();
        // lambda = 0: A = I, V = -q + 2q = q
        assert_relative_eq!(ubre(&[0.0], &w, &pen), 6.0, epsilon = 1e-8);
        // lambda -> inf: tr(A) -> null space (2 spline + 1 beta)
        let (_, tr) = effective_df(&[1e12], &w, &pen).unwrap();
        assert_relative_eq!(tr, 3.0, epsilon = 1e-8);
        // dense oracle with an independently computed square root
        let lam = 2.7;
        let eig = SymmetricEigen::new(m.clone());
        let root = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        let z = &root * &w.theta + root.clone().try_inverse().unwrap() * &w.g;
        let a = &root * (&m + pen.s_weighted(&[lam])).try_inverse().unwrap() * &root;
        let v = (&z - &a * &z).norm_squared() - 6.0 + 2.0 * a.trace();
        assert_relative_eq!(
            ubre(&[lam], &w, &pen),
            v,
            epsilon = 1e-10,
            max_relative = 1e-10
        );
    }

    #[test]
    fn influence_spectrum_in_unit_interval() {
        let (_, pen) = one_block_penalty(5);
        for seed in 0..20 {
            let m = spd(6, 100 + seed);
            let w = WorkingQuantities::new(DVector::zeros(6), DVector::zeros(6), m).unwrap();
            for lam in [0.0, 0.1, 10.0, 1e6] {
                let a = w.influence(&pen.root_weighted(&[lam])).unwrap();
                let ev = SymmetricEigen::new(a).eigenvalues;
                assert!(ev.min() >= -1e-8 && ev.max() <= 1.0 + 1e-8);
            }
        }
    }

    #[test]
    fn null_space_working_data_drives_lambda_to_clamp() {
        let (_, pen) = one_block_penalty(5);
        let m = spd(6, 8);
        // theta linear in the knots with g = 0: z = sqrt(M) theta lies in sqrt(M) null(S)
        let theta = DVector::from_vec(vec![0.0, 0.3, 0.6, 0.9, 1.2, 0.7]);
        let w = WorkingQuantities::new(theta, DVector::zeros(6), m).unwrap();
        let opts = FitOptions::default();
        let up = optimize_lambda(&w, &pen, &[1.0], &opts);
        // UBRE differences beyond ~1e10 are below rounding
        assert!(up.lambda[0] > 1e10, "{:?}", up.lambda);
        assert!(ubre(&up.lambda, &w, &pen) <= ubre(&[opts.lambda_max], &w, &pen) + 1e-10);
    }

    #[test]
    fn optimizer_never_worse_than_start() {
        let (_, pen) = one_block_penalty(5);
        for seed in 0..10 {
            let m = spd(6, 200 + seed);
            let theta = DVector::from_fn(6, |i, _| ((i * 7 + seed as usize) % 5) as f64 - 2.0);
            let g = DVector::from_fn(6, |i, _| ((i * 3 + seed as usize) % 4) as f64 - 1.5);
            let w = WorkingQuantities::new(theta, g, m).unwrap();
            let start = [0.37];
            let up = optimize_lambda(&w, &pen, &start, &FitOptions::default());
            assert!(ubre(&up.lambda, &w, &pen) <= ubre(&start, &w, &pen) + 1e-10);
        }
    }
}

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MarkovError;
use crate::splinebasis::{BasisSpec, KnotVector};

/// An allowed transition between two states (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
}

impl Transition {
    pub fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }
}

impl fmt::Display for Transition {
    /// Printed with 1-based state labels, e.g. `1->2`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from + 1, self.to + 1)
    }
}

/// State space, allowed transitions and covariates of a multistate model.
///
/// The last state is the death state used for exactly observed deaths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionStructure {
    n_states: usize,
    transitions: Vec<Transition>,
    covariate_names: Vec<String>,
}

impl TransitionStructure {
    pub fn new(
        n_states: usize,
        transitions: impl IntoIterator<Item = Transition>,
        covariate_names: Vec<String>,
    ) -> Result<Self, MarkovError> {
        let mut transitions: Vec<Transition> = transitions.into_iter().collect();
        transitions.sort();
        transitions.dedup();
        if transitions.is_empty() {
            return Err(MarkovError::Structure("no allowed transitions".into()));
        }
        for tr in &transitions {
            if tr.from >= n_states || tr.to >= n_states {
                return Err(MarkovError::Structure(format!(
                    "transition {tr} outside state space 1..{n_states}"
                )));
            }
            if tr.from == tr.to {
                return Err(MarkovError::Structure(format!("self transition {tr}")));
            }
        }
        Ok(Self {
            n_states,
            transitions,
            covariate_names,
        })
    }

    /// Progressive illness-death model: 1->2, 1->3, 2->3.
    pub fn illness_death(covariate_names: Vec<String>) -> Self {
        Self::new(
            3,
            [
                Transition::new(0, 1),
                Transition::new(0, 2),
                Transition::new(1, 2),
            ],
            covariate_names,
        )
        .expect("valid illness-death structure")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn death_state(&self) -> usize {
        self.n_states - 1
    }

    /// Allowed transitions in row-major `(from, to)` order.
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn index_of(&self, tr: Transition) -> Option<usize> {
        self.transitions.binary_search(&tr).ok()
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        self.index_of(Transition::new(from, to)).is_some()
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        !self.transitions.iter().any(|t| t.from == state)
    }
}

/// Baseline log-hazard of one transition.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// `sum_k alpha_k B_k(t)` with a penalised cubic regression spline.
    Spline(BasisSpec),
    /// A single time-constant log-rate.
    Constant,
}

impl Baseline {
    pub fn spline(knots: KnotVector) -> Self {
        Baseline::Spline(BasisSpec::new(knots))
    }

    pub fn dim(&self) -> usize {
        match self {
            Baseline::Spline(b) => b.dim(),
            Baseline::Constant => 1,
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Baseline::Spline(b) => b.eval_into(t, out),
            Baseline::Constant => out[0] = 1.0,
        }
    }

    pub fn knots(&self) -> Option<&KnotVector> {
        match self {
            Baseline::Spline(b) => Some(b.knots()),
            Baseline::Constant => None,
        }
    }
}

/// Which model quantity a flattened parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Basis coefficient `j` of transition index `transition`.
    Alpha { transition: usize, j: usize },
    /// Covariate effect `m` of one transition.
    Beta { transition: usize, m: usize },
    /// Covariate effect `m` common to every transition.
    SharedBeta { m: usize },
}

/// Hazard model: structure, per-transition baselines and parameter layout.
///
/// Flattening order: transitions in row-major order, alpha before beta within
/// each transition. With `share_beta`, one covariate vector is appended after
/// the last transition block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    structure: TransitionStructure,
    baselines: Vec<Baseline>,
    share_beta: bool,
    alpha_offsets: Vec<usize>,
    beta_offsets: Vec<usize>,
    n_params: usize,
    roles: Vec<ParamRole>,
}

impl ModelSpec {
    pub fn new(
        structure: TransitionStructure,
        baselines: Vec<Baseline>,
        share_beta: bool,
    ) -> Result<Self, MarkovError> {
        if baselines.len() != structure.transitions().len() {
            return Err(MarkovError::Structure(format!(
                "{} baselines for {} transitions",
                baselines.len(),
                structure.transitions().len()
            )));
        }
        let p = structure.n_covariates();
        let mut roles = Vec::new();
        let mut alpha_offsets = Vec::new();
        let mut beta_offsets = Vec::new();
        for (ti, base) in baselines.iter().enumerate() {
            alpha_offsets.push(roles.len());
            roles.extend((0..base.dim()).map(|j| ParamRole::Alpha { transition: ti, j }));
            beta_offsets.push(roles.len());
            if !share_beta {
                roles.extend((0..p).map(|m| ParamRole::Beta { transition: ti, m }));
            }
        }
        if share_beta {
            let off = roles.len();
            beta_offsets.iter_mut().for_each(|b| *b = off);
            roles.extend((0..p).map(|m| ParamRole::SharedBeta { m }));
        }
        Ok(Self {
            structure,
            baselines,
            share_beta,
            alpha_offsets,
            beta_offsets,
            n_params: roles.len(),
            roles,
        })
    }

    pub fn structure(&self) -> &TransitionStructure {
        &self.structure
    }

    pub fn baselines(&self) -> &[Baseline] {
        &self.baselines
    }

    pub fn share_beta(&self) -> bool {
        self.share_beta
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_states(&self) -> usize {
        self.structure.n_states()
    }

    pub fn n_transitions(&self) -> usize {
        self.baselines.len()
    }

    pub fn role(&self, k: usize) -> ParamRole {
        self.roles[k]
    }

    /// Flattened index range of the alpha block of transition `ti`.
    pub fn alpha_range(&self, ti: usize) -> std::ops::Range<usize> {
        let off = self.alpha_offsets[ti];
        off..off + self.baselines[ti].dim()
    }

    /// Flattened index range of the covariate effects acting on transition `ti`.
    pub fn beta_range(&self, ti: usize) -> std::ops::Range<usize> {
        let off = self.beta_offsets[ti];
        off..off + self.structure.n_covariates()
    }

    /// Human-readable parameter name, e.g. `alpha[1->2].3` or `beta[1->3].dage`.
    pub fn param_name(&self, k: usize) -> String {
        let trs = self.structure.transitions();
        let cov = self.structure.covariate_names();
        match self.roles[k] {
            ParamRole::Alpha { transition, j } => format!("alpha[{}].{}", trs[transition], j + 1),
            ParamRole::Beta { transition, m } => format!("beta[{}].{}", trs[transition], cov[m]),
            ParamRole::SharedBeta { m } => format!("beta.{}", cov[m]),
        }
    }

    /// Indices of spline (penalised) transitions, in transition order.
    pub fn spline_transitions(&self) -> Vec<usize> {
        (0..self.n_transitions())
            .filter(|&ti| matches!(self.baselines[ti], Baseline::Spline(_)))
            .collect()
    }
}

/// Flattened parameter vector `theta` of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: DVector<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            theta: DVector::zeros(spec.n_params()),
        }
    }

    pub fn from_vec(spec: &ModelSpec, theta: Vec<f64>) -> Result<Self, MarkovError> {
        if theta.len() != spec.n_params() {
            return Err(MarkovError::Structure(format!(
                "parameter vector has length {}, model needs {}",
                theta.len(),
                spec.n_params()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(MarkovError::Structure("non-finite parameter".into()));
        }
        Ok(Self {
            theta: DVector::from_vec(theta),
        })
    }

    pub fn alpha<'a>(&'a self, spec: &ModelSpec, ti: usize) -> &'a [f64] {
        &self.theta.as_slice()[spec.alpha_range(ti)]
    }

    pub fn beta<'a>(&'a self, spec: &ModelSpec, ti: usize) -> &'a [f64] {
        &self.theta.as_slice()[spec.beta_range(ti)]
    }
}

/// Hazards of all transitions at one time point and covariate vector, with the
/// basis values needed for derivatives.
#[derive(Debug, Clone)]
pub struct HazardEval {
    pub rates: Vec<f64>,
    /// `basis[ti]` holds `B_j(t)` for transition `ti`.
    pub basis: Vec<Vec<f64>>,
}

impl HazardEval {
    pub fn new(spec: &ModelSpec, params: &ModelParams, t: f64, x: &[f64]) -> Self {
        let mut rates = Vec::with_capacity(spec.n_transitions());
        let mut basis = Vec::with_capacity(spec.n_transitions());
        for (ti, base) in spec.baselines().iter().enumerate() {
            let mut b = vec![0.0; base.dim()];
            base.eval_into(t, &mut b);
            let eta: f64 = b
                .iter()
                .zip(params.alpha(spec, ti))
                .map(|(b, a)| b * a)
                .sum::<f64>()
                + params
                    .beta(spec, ti)
                    .iter()
                    .zip(x)
                    .map(|(b, x)| b * x)
                    .sum::<f64>();
            rates.push(eta.exp());
            basis.push(b);
        }
        Self { rates, basis }
    }

    /// Generator with these hazards as off-diagonals.
    pub fn generator(&self, spec: &ModelSpec) -> DMatrix<f64> {
        let d = spec.n_states();
        let mut q = DMatrix::zeros(d, d);
        for (tr, &rate) in spec.structure().transitions().iter().zip(&self.rates) {
            q[(tr.from, tr.to)] = rate;
        }
        for r in 0..d {
            let row: f64 = (0..d).filter(|&c| c != r).map(|c| q[(r, c)]).sum();
            q[(r, r)] = -row;
        }
        q
    }
}

fn check_covariates(spec: &ModelSpec, x: &[f64]) -> Result<(), MarkovError> {
    if x.len() != spec.structure().n_covariates() {
        return Err(MarkovError::Structure(format!(
            "{} covariate values for {} covariates",
            x.len(),
            spec.structure().n_covariates()
        )));
    }
    Ok(())
}

/// `q_rs(t, x) = exp(sum_k alpha_rs.k B_k(t) + beta_rs' x)`.
pub fn hazard(
    spec: &ModelSpec,
    params: &ModelParams,
    tr: Transition,
    t: f64,
    x: &[f64],
) -> Result<f64, MarkovError> {
    check_covariates(spec, x)?;
    let ti = spec
        .structure()
        .index_of(tr)
        .ok_or(MarkovError::Disallowed(tr))?;
    let base = &spec.baselines()[ti];
    let mut b = vec![0.0; base.dim()];
    base.eval_into(t, &mut b);
    let eta: f64 = b
        .iter()
        .zip(params.alpha(spec, ti))
        .map(|(b, a)| b * a)
        .sum::<f64>()
        + params
            .beta(spec, ti)
            .iter()
            .zip(x)
            .map(|(b, x)| b * x)
            .sum::<f64>();
    Ok(eta.exp())
}

/// Generator matrix `Q(t)` for covariates `x`: hazards off the diagonal, negative
/// row sums on it.
pub fn build_generator(
    spec: &ModelSpec,
    params: &ModelParams,
    t: f64,
    x: &[f64],
) -> Result<DMatrix<f64>, MarkovError> {
    check_covariates(spec, x)?;
    Ok(HazardEval::new(spec, params, t, x).generator(spec))
}

/// Partial derivative of `Q(t)` with respect to flattened parameter `k`.
pub fn dq_dtheta(
    spec: &ModelSpec,
    params: &ModelParams,
    t: f64,
    x: &[f64],
    k: usize,
) -> Result<DMatrix<f64>, MarkovError> {
    check_covariates(spec, x)?;
    if k >= spec.n_params() {
        return Err(MarkovError::ParamIndex {
            index: k,
            n_params: spec.n_params(),
        });
    }
    let eval = HazardEval::new(spec, params, t, x);
    let d = spec.n_states();
    let mut dq = DMatrix::zeros(d, d);
    let trs = spec.structure().transitions();
    let mut add = |ti: usize, coef: f64| {
        let tr = trs[ti];
        let v = eval.rates[ti] * coef;
        dq[(tr.from, tr.to)] += v;
        dq[(tr.from, tr.from)] -= v;
    };
    match spec.role(k) {
        ParamRole::Alpha { transition, j } => add(transition, eval.basis[transition][j]),
        ParamRole::Beta { transition, m } => add(transition, x[m]),
        ParamRole::SharedBeta { m } => (0..trs.len()).for_each(|ti| add(ti, x[m])),
    }
    Ok(dq)
}

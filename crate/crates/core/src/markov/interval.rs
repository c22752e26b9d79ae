use nalgebra::{DMatrix, DVector};

use super::expm::{dp_auto, transition_matrix_with, EigenDecomp};
use super::model::{HazardEval, ModelParams, ModelSpec, ParamRole};
use super::MarkovError;

/// Edges of the sub-intervals used for the piecewise-constant approximation.
///
/// Without a grid the interval is used whole. With width `h`, `[t0, t1]` is cut
/// into `ceil((t1 - t0) / h)` equal pieces.
pub fn subinterval_edges(t0: f64, t1: f64, grid_width: Option<f64>) -> Vec<f64> {
    match grid_width {
        Some(h) if h > 0.0 && t1 > t0 => {
            let n = (((t1 - t0) / h) - 1e-9).ceil().max(1.0) as usize;
            let w = (t1 - t0) / n as f64;
            let mut e: Vec<f64> = (0..n).map(|i| t0 + i as f64 * w).collect();
            e.push(t1);
            e
        }
        _ => vec![t0, t1],
    }
}

/// Transition probabilities `P(t0, t1)` with `Q` held constant at the left edge
/// of each (sub-)interval; the sub-interval matrices are multiplied in time order.
pub fn interval_prob(
    spec: &ModelSpec,
    params: &ModelParams,
    t0: f64,
    t1: f64,
    x: &[f64],
    grid_width: Option<f64>,
) -> Result<DMatrix<f64>, MarkovError> {
    if !(t1 >= t0) {
        return Err(MarkovError::Domain(format!(
            "interval end {t1} precedes start {t0}"
        )));
    }
    if x.len() != spec.structure().n_covariates() {
        return Err(MarkovError::Structure(format!(
            "{} covariate values for {} covariates",
            x.len(),
            spec.structure().n_covariates()
        )));
    }
    let d = spec.n_states();
    let edges = subinterval_edges(t0, t1, grid_width);
    let mut p = DMatrix::identity(d, d);
    for w in edges.windows(2) {
        let q = HazardEval::new(spec, params, w[0], x).generator(spec);
        let dec = EigenDecomp::new(&q);
        p *= transition_matrix_with(&q, &dec, w[1] - w[0])?;
    }
    Ok(p)
}

/// Observed outcome at the end of an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Seen in this state at the end of the interval.
    State(usize),
    /// Died at exactly the interval end: `sum_s P_{r s} q_{s D}(t0)`.
    ExactDeath,
}

/// Log-probability of one observed interval and its gradient in `theta`.
#[derive(Debug, Clone)]
pub struct IntervalGradient {
    /// Likelihood of the interval (not logged); `<= 0` means impossible.
    pub likelihood: f64,
    pub log_likelihood: f64,
    /// Gradient of the log-likelihood; empty when not requested or impossible.
    pub gradient: DVector<f64>,
}

struct Piece {
    hazards: HazardEval,
    q: DMatrix<f64>,
    dec: EigenDecomp,
    p: DMatrix<f64>,
    dt: f64,
}

impl IntervalGradient {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        spec: &ModelSpec,
        params: &ModelParams,
        t0: f64,
        t1: f64,
        from: usize,
        x: &[f64],
        outcome: Outcome,
        grid_width: Option<f64>,
        with_gradient: bool,
    ) -> Result<Self, MarkovError> {
        if !(t1 >= t0) {
            return Err(MarkovError::Domain(format!(
                "interval end {t1} precedes start {t0}"
            )));
        }
        let d = spec.n_states();
        let structure = spec.structure();
        let trs = structure.transitions();
        let edges = subinterval_edges(t0, t1, grid_width);
        let mut pieces = Vec::with_capacity(edges.len() - 1);
        for w in edges.windows(2) {
            let hazards = HazardEval::new(spec, params, w[0], x);
            let q = hazards.generator(spec);
            let dec = EigenDecomp::new(&q);
            let p = transition_matrix_with(&q, &dec, w[1] - w[0])?;
            pieces.push(Piece {
                hazards,
                q,
                dec,
                p,
                dt: w[1] - w[0],
            });
        }

        // L = e_from' P_1 ... P_n w
        let death = structure.death_state();
        let mut target = DVector::zeros(d);
        match outcome {
            Outcome::State(s) => target[s] = 1.0,
            Outcome::ExactDeath => {
                for (ti, tr) in trs.iter().enumerate() {
                    if tr.to == death && tr.from != death {
                        target[tr.from] = pieces[0].hazards.rates[ti];
                    }
                }
            }
        }
        // suffix[i] = P_{i+1} ... P_n w  (suffix[n] = w)
        let n = pieces.len();
        let mut suffix = vec![target.clone(); n + 1];
        for i in (0..n).rev() {
            suffix[i] = &pieces[i].p * &suffix[i + 1];
        }
        // prefix[i] = e_from' P_1 ... P_i  as a column (prefix[0] = e_from)
        let mut prefix = Vec::with_capacity(n + 1);
        let mut row = DVector::zeros(d);
        row[from] = 1.0;
        prefix.push(row.clone());
        for piece in &pieces {
            row = piece.p.tr_mul(&row);
            prefix.push(row.clone());
        }
        let likelihood = prefix[0].dot(&suffix[0]);
        if !with_gradient || likelihood <= 0.0 {
            return Ok(Self {
                likelihood,
                log_likelihood: likelihood.ln(),
                gradient: DVector::zeros(0),
            });
        }

        let mut grad = DVector::zeros(spec.n_params());
        let mut dq = DMatrix::zeros(d, d);
        for (i, piece) in pieces.iter().enumerate() {
            let kernel = piece.dec.accepted().then(|| piece.dec.kernel(piece.dt));
            for (ti, tr) in trs.iter().enumerate() {
                // derivative with respect to the log-hazard of transition ti on piece i
                let rate = piece.hazards.rates[ti];
                dq.fill(0.0);
                dq[(tr.from, tr.to)] = rate;
                dq[(tr.from, tr.from)] = -rate;
                let dp = match &kernel {
                    Some(k) => match k.derivative(&dq) {
                        Ok(dp) => dp,
                        Err(_) => dp_auto(&piece.q, &piece.dec, &dq, piece.dt),
                    },
                    None => dp_auto(&piece.q, &piece.dec, &dq, piece.dt),
                };
                let mut d_eta = prefix[i].dot(&(&dp * &suffix[i + 1]));
                if i == 0 && outcome == Outcome::ExactDeath && tr.to == death {
                    // q_{sD}(t0) itself depends on this log-hazard
                    d_eta += prefix[n][tr.from] * target[tr.from];
                }
                if d_eta == 0.0 {
                    continue;
                }
                let d_log = d_eta / likelihood;
                scatter_log_hazard_derivative(spec, &piece.hazards, ti, x, d_log, &mut grad);
            }
        }
        Ok(Self {
            likelihood,
            log_likelihood: likelihood.ln(),
            gradient: grad,
        })
    }
}

/// Adds `d_log * d eta_ti / d theta` into `grad` (chain rule through the basis
/// values and covariates).
fn scatter_log_hazard_derivative(
    spec: &ModelSpec,
    hazards: &HazardEval,
    ti: usize,
    x: &[f64],
    d_log: f64,
    grad: &mut DVector<f64>,
) {
    for (k, b) in spec.alpha_range(ti).zip(&hazards.basis[ti]) {
        grad[k] += d_log * b;
    }
    for (k, xm) in spec.beta_range(ti).zip(x) {
        debug_assert!(matches!(
            spec.role(k),
            ParamRole::Beta { .. } | ParamRole::SharedBeta { .. }
        ));
        grad[k] += d_log * xm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{transition_matrix, Baseline, Transition, TransitionStructure};
    use crate::splinebasis::KnotVector;
    use approx::assert_relative_eq;

    fn two_state_constant() -> ModelSpec {
        let s = TransitionStructure::new(2, [Transition::new(0, 1)], vec![]).unwrap();
        ModelSpec::new(s, vec![Baseline::Constant], false).unwrap()
    }

    #[test]
    fn edges_cover_interval() {
        assert_eq!(subinterval_edges(0.0, 1.0, None), vec![0.0, 1.0]);
        let e = subinterval_edges(0.0, 1.0, Some(0.1));
        assert_eq!(e.len(), 11);
        assert_eq!(*e.last().unwrap(), 1.0);
        assert_eq!(subinterval_edges(2.0, 2.5, Some(1.2)), vec![2.0, 2.5]);
        assert_eq!(subinterval_edges(0.0, 2.5, Some(1.2)).len(), 4);
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let spec = two_state_constant();
        let p = ModelParams::from_vec(&spec, vec![0.3]).unwrap();
        let m = interval_prob(&spec, &p, 1.0, 1.0, &[], Some(0.5)).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
        assert!(interval_prob(&spec, &p, 1.0, 0.5, &[], None).is_err());
    }

    #[test]
    fn grid_is_irrelevant_for_constant_hazards() {
        let s = TransitionStructure::illness_death(vec![]);
        let spec = ModelSpec::new(s, vec![Baseline::Constant; 3], false).unwrap();
        let p = ModelParams::from_vec(&spec, vec![-0.5, -1.2, 0.1]).unwrap();
        let a = interval_prob(&spec, &p, 0.3, 2.9, &[], None).unwrap();
        let b = interval_prob(&spec, &p, 0.3, 2.9, &[], Some(0.07)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn grid_refinement_converges_for_linear_log_hazard() {
        let s = TransitionStructure::illness_death(vec![]);
        let knots = KnotVector::new(vec![0.0, 1.0, 2.0]).unwrap();
        let spec = ModelSpec::new(s, vec![Baseline::spline(knots); 3], false).unwrap();
        // log-hazards linear in t
        let theta = vec![-1.0, -0.5, 0.0, -2.0, -1.7, -1.4, -0.3, -0.6, -0.9];
        let p = ModelParams::from_vec(&spec, theta).unwrap();
        let coarse = interval_prob(&spec, &p, 0.0, 2.0, &[], Some(0.01)).unwrap();
        let fine = interval_prob(&spec, &p, 0.0, 2.0, &[], Some(0.001)).unwrap();
        assert!((coarse - fine).amax() < 1e-3);
    }

    #[test]
    fn exact_death_contribution_sums_over_living_states() {
        let s = TransitionStructure::illness_death(vec![]);
        let spec = ModelSpec::new(s, vec![Baseline::Constant; 3], false).unwrap();
        let theta = vec![(0.4f64).ln(), (0.1f64).ln(), (0.7f64).ln()];
        let p = ModelParams::from_vec(&spec, theta).unwrap();
        let ig = IntervalGradient::compute(
            &spec,
            &p,
            0.0,
            1.0,
            0,
            &[],
            Outcome::ExactDeath,
            None,
            false,
        )
        .unwrap();
        // closed-form progressive probabilities with constant hazards
        let (a, b, c) = (0.4f64, 0.1f64, 0.7f64);
        let p11 = (-(a + b)).exp();
        let p12 = a / (a + b - c) * ((-c).exp() - (-(a + b)).exp());
        let expect = p11 * b + p12 * c;
        assert_relative_eq!(ig.likelihood, expect, epsilon = 1e-14);
        let q = build(&spec, &p);
        let pm = transition_matrix(&q, 1.0).unwrap();
        assert_relative_eq!(pm[(0, 1)], p12, epsilon = 1e-14);
    }

    fn build(spec: &ModelSpec, p: &ModelParams) -> DMatrix<f64> {
        crate::markov::build_generator(spec, p, 0.0, &[]).unwrap()
    }
}

//! Cubic regression splines parameterised by their values at the knots.
//!
//! For a coefficient vector `alpha`, `sum_k alpha_k B_k(t)` is the natural cubic
//! spline through the points `(knot_k, alpha_k)`. Outside the knot range the
//! spline continues linearly. The penalty matrix `S` satisfies
//! `alpha' S alpha = integral of f''(t)^2` over the knot range, exactly.
//!
//! Second derivatives at the interior knots are obtained from the values through
//! the tridiagonal system `B gamma = D alpha`, so that `gamma = B^{-1} D alpha`
//! and `S = D' B^{-1} D`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantile::quantile_type7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error(
        "degenerate knots for {label}: need {needed} distinct observation times, found {found}"
    )]
    DegenerateKnots {
        label: String,
        needed: usize,
        found: usize,
    },
    #[error("a cubic regression spline needs at least 3 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knots must be finite and strictly increasing")]
    NotIncreasing,
    #[error("no observation times supplied for {0}")]
    NoTimes(String),
}

/// Strictly increasing, finite knot locations (at least three).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KnotVector(Vec<f64>);

impl KnotVector {
    pub fn new(knots: Vec<f64>) -> Result<Self, SplineError> {
        if knots.len() < 3 {
            return Err(SplineError::TooFewKnots(knots.len()));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SplineError::NotIncreasing);
        }
        Ok(Self(knots))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for KnotVector {
    type Error = SplineError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<KnotVector> for Vec<f64> {
    fn from(k: KnotVector) -> Self {
        k.0
    }
}

/// Places `k` knots at the empirical quantiles `0, 1/(k-1), ..., 1` of `times`.
///
/// Quantiles use linear interpolation of the order statistics. Heavily tied
/// samples (panel visits on a fixed schedule) can produce repeated quantiles;
/// in that case the quantiles are taken over the distinct values instead, which
/// always yields `k` strictly increasing knots once `k` distinct values exist.
/// `label` names the transition (or pooled set) in error messages.
pub fn place_knots(times: &[f64], k: usize, label: &str) -> Result<KnotVector, SplineError> {
    if k < 3 {
        return Err(SplineError::TooFewKnots(k));
    }
    if times.is_empty() {
        return Err(SplineError::NoTimes(label.to_string()));
    }
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(SplineError::DegenerateKnots {
            label: label.to_string(),
            needed: k,
            found: distinct.len(),
        });
    }
    let probs: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
    let knots: Vec<f64> = probs.iter().map(|&p| quantile_type7(&sorted, p)).collect();
    if knots.windows(2).all(|w| w[1] > w[0]) {
        return KnotVector::new(knots);
    }
    let knots: Vec<f64> = probs
        .iter()
        .map(|&p| quantile_type7(&distinct, p))
        .collect();
    KnotVector::new(knots)
}

/// A cubic regression spline basis: dimension equals the number of knots.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    knots: KnotVector,
    widths: Vec<f64>,
    /// K x K map from knot values to second derivatives at the knots
    /// (first and last rows are zero: natural boundary conditions).
    second_deriv: DMatrix<f64>,
}

impl PartialEq for BasisSpec {
    fn eq(&self, other: &Self) -> bool {
        self.knots == other.knots
    }
}

impl BasisSpec {
    pub fn new(knots: KnotVector) -> Self {
        let x = knots.as_slice();
        let k = x.len();
        let widths: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let (band, diff) = band_and_difference(&widths);
        let interior = band
            .cholesky()
            .expect("tridiagonal spline system is positive definite")
            .solve(&diff);
        let mut second_deriv = DMatrix::zeros(k, k);
        second_deriv.rows_mut(1, k - 2).copy_from(&interior);
        Self {
            knots,
            widths,
            second_deriv,
        }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    /// Basis values `B_1(t), ..., B_K(t)`.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(t, out.as_mut_slice());
        out
    }

    /// Writes the basis values at `t` into `out` (length K).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let x = self.knots.as_slice();
        let k = x.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let f = &self.second_deriv;
        if t < x[0] {
            // f(x1) + (t - x1) f'(x1), f'(x1) = (a2 - a1)/h - h (2 g1 + g2)/6
            let h = self.widths[0];
            let d = t - x[0];
            out[0] += 1.0 - d / h;
            out[1] += d / h;
            for (j, o) in out.iter_mut().enumerate() {
                *o -= d * h * (2.0 * f[(0, j)] + f[(1, j)]) / 6.0;
            }
            return;
        }
        if t > x[k - 1] {
            // f(xK) + (t - xK) f'(xK), f'(xK) = (aK - aK-1)/h + h (gK-1 + 2 gK)/6
            let h = self.widths[k - 2];
            let d = t - x[k - 1];
            out[k - 1] += 1.0 + d / h;
            out[k - 2] -= d / h;
            for (j, o) in out.iter_mut().enumerate() {
                *o += d * h * (f[(k - 2, j)] + 2.0 * f[(k - 1, j)]) / 6.0;
            }
            return;
        }
        let i = self.interval_index(t);
        let h = self.widths[i];
        let left = x[i + 1] - t;
        let right = t - x[i];
        let am = left / h;
        let ap = right / h;
        let cm = (left * left * left / h - h * left) / 6.0;
        let cp = (right * right * right / h - h * right) / 6.0;
        out[i] += am;
        out[i + 1] += ap;
        for (j, o) in out.iter_mut().enumerate() {
            *o += cm * f[(i, j)] + cp * f[(i + 1, j)];
        }
    }

    /// Index `i` of the knot interval `[x_i, x_{i+1}]` holding `t` (t inside range).
    fn interval_index(&self, t: f64) -> usize {
        let x = self.knots.as_slice();
        let k = x.len();
        match x.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => i.min(k - 2),
            Err(i) => (i.max(1) - 1).min(k - 2),
        }
    }

    /// Rows are `eval(times[i])`.
    pub fn basis_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let k = self.dim();
        let mut out = DMatrix::zeros(times.len(), k);
        let mut row = vec![0.0; k];
        for (i, &t) in times.iter().enumerate() {
            self.eval_into(t, &mut row);
            for j in 0..k {
                out[(i, j)] = row[j];
            }
        }
        out
    }

    /// Integrated squared second derivative penalty.
    pub fn penalty_matrix(&self) -> PenaltyBlock {
        let (band, diff) = band_and_difference(&self.widths);
        let chol = band
            .cholesky()
            .expect("tridiagonal spline system is positive definite");
        let factor = chol
            .l()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        let s = factor.transpose() * &factor;
        let s = (&s + s.transpose()) * 0.5;
        PenaltyBlock { matrix: s, factor }
    }
}

/// The tridiagonal matrix `B` ((K-2) x (K-2)) and the second-difference map `D`
/// ((K-2) x K) relating interior second derivatives to knot values.
fn band_and_difference(h: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = h.len() + 1;
    let m = k - 2;
    let mut band = DMatrix::zeros(m, m);
    let mut diff = DMatrix::zeros(m, k);
    for i in 0..m {
        diff[(i, i)] = 1.0 / h[i];
        diff[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        diff[(i, i + 2)] = 1.0 / h[i + 1];
        band[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < m {
            band[(i, i + 1)] = h[i + 1] / 6.0;
            band[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    (band, diff)
}

/// Symmetric positive semidefinite penalty for one spline block.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    /// `R` with `matrix = R'R`; `R alpha` is a scaled second difference, so the
    /// forms below stay accurate when `alpha` is nearly linear.
    pub factor: DMatrix<f64>,
}

impl PenaltyBlock {
    pub fn quad_form(&self, alpha: &[f64]) -> f64 {
        (&self.factor * DVector::from_column_slice(alpha)).norm_squared()
    }

    /// `S alpha`.
    pub fn apply(&self, alpha: &[f64]) -> DVector<f64> {
        self.factor
            .tr_mul(&(&self.factor * DVector::from_column_slice(alpha)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(knots: &[f64]) -> BasisSpec {
        BasisSpec::new(KnotVector::new(knots.to_vec()).unwrap())
    }

    /// Value and second derivative of the interpolating natural spline, computed
    /// independently by solving the classical moment equations for the data.
    fn natural_spline_oracle(x: &[f64], y: &[f64], t: f64) -> (f64, f64) {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        // dense system for moments m_1..m_n with m_1 = m_n = 0
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        a[(0, 0)] = 1.0;
        a[(n - 1, n - 1)] = 1.0;
        for i in 1..n - 1 {
            a[(i, i - 1)] = h[i - 1];
            a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
            a[(i, i + 1)] = h[i];
            rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        let m = a.lu().solve(&rhs).unwrap();
        let i = (0..n - 1).find(|&i| t <= x[i + 1]).unwrap_or(n - 2);
        let (l, r, hi) = (x[i + 1] - t, t - x[i], h[i]);
        let val = m[i] * l.powi(3) / (6.0 * hi)
            + m[i + 1] * r.powi(3) / (6.0 * hi)
            + (y[i] / hi - m[i] * hi / 6.0) * l
            + (y[i + 1] / hi - m[i + 1] * hi / 6.0) * r;
        let d2 = m[i] * l / hi + m[i + 1] * r / hi;
        (val, d2)
    }

    #[test]
    fn knots_of_uniform_grid() {
        let times: Vec<f64> = (0..=10).map(f64::from).collect();
        let k = place_knots(&times, 3, "1->2").unwrap();
        assert_eq!(k.as_slice(), &[0.0, 5.0, 10.0]);
    }

    #[test]
    fn knots_degenerate() {
        let err = place_knots(&[0.0, 0.0, 4.0, 4.0], 3, "1->2").unwrap_err();
        assert!(matches!(err, SplineError::DegenerateKnots { found: 2, .. }));
        assert!(err.to_string().contains("1->2"));
    }

    #[test]
    fn knots_fall_back_to_distinct_values_under_heavy_ties() {
        let mut times = vec![0.0; 50];
        times.extend([1.0, 2.0, 3.0, 4.0]);
        let k = place_knots(&times, 4, "pooled").unwrap();
        assert_eq!(k.first(), 0.0);
        assert_eq!(k.last(), 4.0);
        assert!(k.as_slice().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn basis_interpolates_at_knots() {
        let s = spec(&[0.0, 0.7, 2.0, 2.5, 4.0, 7.5]);
        let id = s.basis_matrix(s.knots().as_slice());
        assert_relative_eq!(id, DMatrix::identity(6, 6), epsilon = 1e-12);
        let single = s.basis_matrix(&[1.3]);
        assert_relative_eq!(single.row(0).transpose(), s.eval(1.3), epsilon = 0.0);
    }

    #[test]
    fn basis_matches_natural_spline_oracle() {
        let x = [0.0, 0.7, 2.0, 2.5, 4.0, 7.5];
        let y = [0.3, -1.0, 0.4, 2.0, 1.1, -0.5];
        let s = spec(&x);
        for i in 0..=300 {
            let t = 7.5 * i as f64 / 300.0;
            let b = s.eval(t);
            let val: f64 = b.iter().zip(y.iter()).map(|(b, a)| b * a).sum();
            let (expect, _) = natural_spline_oracle(&x, &y, t);
            assert_relative_eq!(val, expect, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn linear_extrapolation_beyond_last_knot() {
        let x = [0.0, 1.0, 3.0, 4.0, 6.0];
        let s = spec(&x);
        let alpha: Vec<f64> = x.iter().map(|k| 0.5 - 0.25 * k).collect();
        let f = |t: f64| {
            s.eval(t)
                .iter()
                .zip(&alpha)
                .map(|(b, a)| b * a)
                .sum::<f64>()
        };
        assert_relative_eq!(f(7.0), 0.5 - 0.25 * 7.0, epsilon = 1e-12);
        assert_relative_eq!(f(-1.0), 0.5 + 0.25, epsilon = 1e-12);

        // nonlinear alpha: value and slope continuous at the boundaries
        let alpha = [0.1, 1.0, -0.4, 0.2, 0.9];
        let g = |t: f64| {
            s.eval(t)
                .iter()
                .zip(&alpha)
                .map(|(b, a)| b * a)
                .sum::<f64>()
        };
        let e = 1e-6;
        for &b in &[0.0, 6.0] {
            assert_relative_eq!(g(b - e), g(b + e), epsilon = 1e-5);
            let slope_in = (g(b) - g(b - 2.0 * e)) / (2.0 * e);
            let slope_out = (g(b + 2.0 * e) - g(b)) / (2.0 * e);
            assert_relative_eq!(slope_in, slope_out, epsilon = 1e-4);
        }
        // the line continues beyond the last knot with the boundary slope
        let slope = (g(6.0) - g(6.0 - 1e-6)) / 1e-6;
        assert_relative_eq!(g(7.0), g(6.0) + slope, epsilon = 1e-5);
    }

    #[test]
    fn penalty_annihilates_constants_and_lines() {
        let x = [0.0, 0.7, 2.0, 2.5, 4.0, 7.5];
        let pen = spec(&x).penalty_matrix();
        assert!(pen.quad_form(&[2.0; 6]).abs() < 1e-12);
        assert!(pen.quad_form(&x).abs() < 1e-12);
    }

    #[test]
    fn penalty_matches_simpson_quadrature() {
        let x = [0.0, 1.1, 1.9, 3.5, 5.0];
        let alpha = [0.4, -0.8, 1.7, 0.2, -1.0];
        let s = spec(&x);
        let exact = s.penalty_matrix().quad_form(&alpha);
        // composite Simpson on each knot interval with the oracle's second derivative
        let n = 10_000;
        let mut total = 0.0;
        for w in x.windows(2) {
            let h = (w[1] - w[0]) / n as f64;
            let mut acc = 0.0;
            for j in 0..=n {
                let t = w[0] + j as f64 * h;
                let (_, d2) = natural_spline_oracle(&x, &alpha, t.min(w[1] - 1e-15));
                let c = if j == 0 || j == n {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += c * d2 * d2;
            }
            total += acc * h / 3.0;
        }
        assert_relative_eq!(exact, total, max_relative = 1e-6);
    }
}

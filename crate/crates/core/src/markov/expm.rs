//! Transition matrices `P(t) = exp(tQ)` and their derivatives.
//!
//! The primary route diagonalises `Q = A diag(b) A^{-1}` (complex in general).
//! For a perturbation `dQ` the derivative is `A V A^{-1}` with
//! `V = G o Phi`, `G = A^{-1} dQ A` and
//! `Phi_lm = (exp(b_l t) - exp(b_m t)) / (b_l - b_m)` (`t exp(b_l t)` on ties).
//! Note the conjugation `A^{-1} dQ A`: it is the one consistent with
//! `P = A diag A^{-1}`; `A dQ A^{-1}` disagrees with finite differences.
//!
//! Decompositions with an ill-conditioned eigenvector matrix are rejected, and
//! callers fall back to scaling-and-squaring for `P` and to central differences
//! for `dP`.

use nalgebra::{Complex, DMatrix, DVector};

use super::MarkovError;

pub type C64 = Complex<f64>;

/// Largest accepted 1-norm condition number of the eigenvector matrix.
pub const MAX_CONDITION: f64 = 1e8;
/// Relative gap below which two eigenvalues are treated as equal.
pub const EIGEN_TIE: f64 = 1e-8;
/// Largest imaginary residue tolerated in a real result.
pub const IMAG_TOL: f64 = 1e-8;
/// Most negative entry tolerated (and clamped to zero) in a probability matrix.
pub const NEG_TOL: f64 = 1e-8;
/// Step for the finite-difference derivative fallback.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EigenDecomp {
    /// Eigenvectors as unit-norm columns.
    pub vectors: DMatrix<C64>,
    pub values: DVector<C64>,
    pub inverse: DMatrix<C64>,
    pub condition: f64,
    accepted: bool,
}

impl EigenDecomp {
    /// Decomposes a real square matrix. Never fails; check [`Self::accepted`].
    pub fn new(q: &DMatrix<f64>) -> Self {
        let d = q.nrows();
        if q.iter().any(|v| !v.is_finite()) {
            return Self {
                vectors: DMatrix::identity(d, d),
                values: DVector::zeros(d),
                inverse: DMatrix::identity(d, d),
                condition: f64::INFINITY,
                accepted: false,
            };
        }
        let raw = q.clone().complex_eigenvalues();
        let qc: DMatrix<C64> = q.map(|v| C64::new(v, 0.0));

        // group numerically equal eigenvalues
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        let mut assigned = vec![false; d];
        for i in 0..d {
            if assigned[i] {
                continue;
            }
            let tol = EIGEN_TIE * raw[i].norm().max(1.0);
            let cluster: Vec<usize> = (i..d)
                .filter(|&j| !assigned[j] && (raw[j] - raw[i]).norm() <= tol)
                .collect();
            cluster.iter().for_each(|&j| assigned[j] = true);
            clusters.push(cluster);
        }

        let mut vectors = DMatrix::<C64>::zeros(d, d);
        let mut values = Vec::with_capacity(d);
        for cluster in &clusters {
            let centre =
                cluster.iter().map(|&j| raw[j]).sum::<C64>() / C64::new(cluster.len() as f64, 0.0);
            // null space of (Q - b I): right singular vectors of the smallest singular values
            let shifted = &qc - DMatrix::<C64>::identity(d, d) * centre;
            let svd = shifted.svd(false, true);
            let v_t = svd.v_t.expect("right singular vectors requested");
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
            for (slot, &j) in cluster.iter().enumerate() {
                let v: DVector<C64> = v_t.row(order[slot]).transpose().map(|c| c.conj());
                let norm = v.norm();
                vectors.set_column(values.len(), &(v / C64::new(norm, 0.0)));
                values.push(raw[j]);
            }
        }
        let values = DVector::from_vec(values);

        let (inverse, condition) = match vectors.clone().try_inverse() {
            Some(inv) => {
                let cond = norm1(&vectors) * norm1(&inv);
                (
                    inv,
                    if cond.is_finite() {
                        cond
                    } else {
                        f64::INFINITY
                    },
                )
            }
            None => (DMatrix::zeros(d, d), f64::INFINITY),
        };
        let mut accepted = condition <= MAX_CONDITION;
        if accepted {
            let recon = &vectors * DMatrix::from_diagonal(&values) * &inverse;
            let err = recon
                .iter()
                .zip(qc.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            accepted = err <= 1e-8 * scale.max(f64::MIN_POSITIVE) || err == 0.0;
        }
        Self {
            vectors,
            values,
            inverse,
            condition,
            accepted,
        }
    }

    pub fn accepted(&self) -> bool {
        self.accepted
    }

    /// `A diag(exp(b dt)) A^{-1}` as a complex matrix.
    fn exp_complex(&self, dt: f64) -> DMatrix<C64> {
        let e = self.values.map(|b| (b * dt).exp());
        let mut scaled = self.vectors.clone();
        for (j, mut c) in scaled.column_iter_mut().enumerate() {
            c *= e[j];
        }
        scaled * &self.inverse
    }

    /// Per-elapsed-time factors reused across all derivative directions.
    pub fn kernel(&self, dt: f64) -> DerivativeKernel<'_> {
        let d = self.values.len();
        let mut phi = DMatrix::<C64>::zeros(d, d);
        for l in 0..d {
            for m in 0..d {
                phi[(l, m)] = exp_divided_difference(self.values[l], self.values[m], dt);
            }
        }
        DerivativeKernel { decomp: self, phi }
    }
}

fn norm1(m: &DMatrix<C64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(exp(a t) - exp(b t)) / (a - b)`, or `t exp(a t)` when `a` and `b` tie.
pub fn exp_divided_difference(a: C64, b: C64, t: f64) -> C64 {
    if (a - b).norm() <= EIGEN_TIE * a.norm().max(1.0) {
        return C64::new(t, 0.0) * (a * t).exp();
    }
    // expand around the eigenvalue with the larger real part so exp stays bounded
    let (hi, lo) = if a.re >= b.re { (a, b) } else { (b, a) };
    let x = (lo - hi) * t;
    C64::new(t, 0.0) * (hi * t).exp() * expm1_over_x(x)
}

/// `(exp(x) - 1) / x` without cancellation near zero.
fn expm1_over_x(x: C64) -> C64 {
    if x.norm() < 1e-2 {
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for n in 2..10 {
            term = term * x / C64::new(n as f64, 0.0);
            sum += term;
        }
        sum
    } else {
        (x.exp() - C64::new(1.0, 0.0)) / x
    }
}

/// Holds `Phi` for one elapsed time so several `dQ` directions share it.
pub struct DerivativeKernel<'a> {
    decomp: &'a EigenDecomp,
    phi: DMatrix<C64>,
}

impl DerivativeKernel<'_> {
    /// `dP = A ((A^{-1} dQ A) o Phi) A^{-1}`, real part after a residue check.
    pub fn derivative(&self, dq: &DMatrix<f64>) -> Result<DMatrix<f64>, MarkovError> {
        let a = &self.decomp.vectors;
        let ainv = &self.decomp.inverse;
        let dqc = dq.map(|v| C64::new(v, 0.0));
        let g = ainv * dqc * a;
        let v = g.component_mul(&self.phi);
        let dp = a * v * ainv;
        real_part(&dp)
    }
}

fn real_part(m: &DMatrix<C64>) -> Result<DMatrix<f64>, MarkovError> {
    let scale = m.iter().fold(1.0f64, |s, c| s.max(c.re.abs()));
    let imag = m.iter().fold(0.0f64, |s, c| s.max(c.im.abs()));
    if imag > IMAG_TOL * scale {
        return Err(MarkovError::Numerical(format!(
            "imaginary residue {imag:.3e} in a real matrix function"
        )));
    }
    Ok(m.map(|c| c.re))
}

/// Largest entry of `dt Q` accepted by [`expm_pade`].
pub const PADE_MAX_NORM: f64 = 1e15;

/// `exp(dt Q)` by scaling-and-squaring with a Pade approximant.
///
/// Input that is non-finite or has an entry above [`PADE_MAX_NORM`] yields a
/// NaN matrix: nalgebra estimates norms of high powers of `dt Q`, which
/// overflow, and the squaring count then becomes unbounded.
pub fn expm_pade(q: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let a = q * dt;
    if a.iter().any(|v| !v.is_finite()) || a.amax() > PADE_MAX_NORM {
        return DMatrix::from_element(q.nrows(), q.ncols(), f64::NAN);
    }
    a.exp()
}

/// Checks and clamps a candidate probability matrix. Returns `None` when an
/// entry is more negative than the tolerance or not finite.
fn clean_probabilities(mut p: DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if p.iter().any(|v| !v.is_finite() || *v < -NEG_TOL) {
        return None;
    }
    p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    // rows of absorbing states are exactly unit rows
    for r in 0..q.nrows() {
        if q.row(r).iter().all(|v| *v == 0.0) {
            p.row_mut(r).fill(0.0);
            p[(r, r)] = 1.0;
        }
    }
    Some(p)
}

/// `P = exp(dt Q)`; eigendecomposition when accepted, else scaling-and-squaring.
pub fn transition_matrix(q: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>, MarkovError> {
    let decomp = EigenDecomp::new(q);
    transition_matrix_with(q, &decomp, dt)
}

/// As [`transition_matrix`] with a precomputed decomposition of `q`.
pub fn transition_matrix_with(
    q: &DMatrix<f64>,
    decomp: &EigenDecomp,
    dt: f64,
) -> Result<DMatrix<f64>, MarkovError> {
    if !(dt >= 0.0) {
        return Err(MarkovError::Domain(format!(
            "elapsed time {dt} is negative"
        )));
    }
    if !dt.is_finite() || q.iter().any(|v| !v.is_finite()) {
        return Err(MarkovError::Numerical(
            "generator has non-finite entries (hazard overflow)".into(),
        ));
    }
    let d = q.nrows();
    if dt == 0.0 {
        return Ok(DMatrix::identity(d, d));
    }
    if decomp.accepted() {
        if let Ok(p) = real_part(&decomp.exp_complex(dt)) {
            if let Some(p) = clean_probabilities(p, q) {
                return Ok(p);
            }
        }
    }
    clean_probabilities(expm_pade(q, dt), q).ok_or_else(|| {
        MarkovError::Numerical(format!(
            "transition matrix for dt = {dt} has entries below -{NEG_TOL:e}"
        ))
    })
}

/// Derivative of `exp(dt Q)` in the direction `dq` via the eigendecomposition.
/// Errors when the decomposition was rejected; see [`dp_fallback`].
pub fn dp_dtheta(
    decomp: &EigenDecomp,
    dq: &DMatrix<f64>,
    dt: f64,
) -> Result<DMatrix<f64>, MarkovError> {
    if !decomp.accepted() {
        return Err(MarkovError::Numerical(format!(
            "eigendecomposition rejected (condition {:.3e})",
            decomp.condition
        )));
    }
    if dt == 0.0 {
        return Ok(DMatrix::zeros(dq.nrows(), dq.ncols()));
    }
    decomp.kernel(dt).derivative(dq)
}

/// Central difference of `exp(dt (Q + h dQ))` in `h`, step [`FD_STEP`].
pub fn dp_fallback(q: &DMatrix<f64>, dq: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let plus = expm_pade(&(q + dq * FD_STEP), dt);
    let minus = expm_pade(&(q - dq * FD_STEP), dt);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Derivative with automatic fallback to finite differences.
pub fn dp_auto(q: &DMatrix<f64>, decomp: &EigenDecomp, dq: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    match dp_dtheta(decomp, dq, dt) {
        Ok(dp) => dp,
        Err(_) => dp_fallback(q, dq, dt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn overflowing_generator_is_an_error() {
        let q = DMatrix::from_row_slice(2, 2, &[-f64::INFINITY, f64::INFINITY, 0.0, 0.0]);
        assert!(transition_matrix(&q, 1.0).is_err());
        assert!(expm_pade(&q, 1.0).iter().all(|v| v.is_nan()));
        // finite but large enough to overflow fourth powers
        let big = 3.871234132371513e83;
        let q = DMatrix::from_row_slice(3, 3, &[-big, 0.0, big, 0.0, -0.34, 0.34, 0.0, 0.0, 0.0]);
        assert!(expm_pade(&q, 1.0).iter().all(|v| v.is_nan()));
        let _ = transition_matrix(&q, 1.0);
        let q = q.map(|v| v * 1e-54);
        assert!(expm_pade(&q, 1.0).iter().all(|v| v.is_nan()));
    }

    fn series(q: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
        let d = q.nrows();
        let mut term = DMatrix::<f64>::identity(d, d);
        let mut sum = term.clone();
        for m in 1..=50 {
            term = &term * q * (dt / m as f64);
            sum += &term;
        }
        sum
    }

    #[test]
    fn zero_time_is_identity() {
        let q = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, 0.0, 0.0]);
        assert_eq!(transition_matrix(&q, 0.0).unwrap(), DMatrix::identity(2, 2));
        assert!(transition_matrix(&q, -1.0).is_err());
    }

    #[test]
    fn two_state_closed_form() {
        let q = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, 0.0, 0.0]);
        let p = transition_matrix(&q, 2.0).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(p[(0, 0)], e, epsilon = 1e-14);
        assert_relative_eq!(p[(0, 1)], 1.0 - e, epsilon = 1e-14);
        assert_eq!(p[(1, 1)], 1.0);

        // dP11/dq12 = -t exp(-q t)
        let dq = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]);
        let dec = EigenDecomp::new(&q);
        let dp = dp_dtheta(&dec, &dq, 2.0).unwrap();
        assert_relative_eq!(dp[(0, 0)], -2.0 * e, epsilon = 1e-13);
        assert_relative_eq!(dp[(0, 1)], 2.0 * e, epsilon = 1e-13);
        assert_eq!(dp_dtheta(&dec, &dq, 0.0).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn progressive_matches_series() {
        let q = DMatrix::from_row_slice(3, 3, &[-0.9, 0.6, 0.3, 0.0, -0.45, 0.45, 0.0, 0.0, 0.0]);
        let p = transition_matrix(&q, 1.0).unwrap();
        assert_relative_eq!(p, series(&q, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn complex_eigenvalues_give_real_result() {
        // cyclic 3-state generator has a complex conjugate eigenpair
        let q = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, -1.0]);
        let dec = EigenDecomp::new(&q);
        assert!(dec.accepted());
        assert!(dec.values.iter().any(|b| b.im.abs() > 0.1));
        let p = transition_matrix_with(&q, &dec, 0.8).unwrap();
        assert_relative_eq!(p, series(&q, 0.8), epsilon = 1e-12);
    }

    #[test]
    fn printed_conjugation_disagrees_with_finite_differences() {
        let q = DMatrix::from_row_slice(3, 3, &[-0.9, 0.6, 0.3, 0.2, -0.45, 0.25, 0.0, 0.0, 0.0]);
        let mut dq = DMatrix::zeros(3, 3);
        dq[(0, 1)] = 0.6;
        dq[(0, 0)] = -0.6;
        let dec = EigenDecomp::new(&q);
        let fd = dp_fallback(&q, &dq, 1.5);
        let ours = dp_dtheta(&dec, &dq, 1.5).unwrap();
        assert_relative_eq!(ours, fd, epsilon = 1e-8);

        // G = A dQ A^{-1} instead of A^{-1} dQ A
        let a = &dec.vectors;
        let ainv = &dec.inverse;
        let g = a * dq.map(|v| C64::new(v, 0.0)) * ainv;
        let k = dec.kernel(1.5);
        let wrong = (a * g.component_mul(&k.phi) * ainv).map(|c| c.re);
        assert!((wrong - fd).amax() > 1e-3);
    }

    #[test]
    fn defective_generator_is_rejected_and_falls_back() {
        // equal exit rates along a chain: a Jordan block
        let q = DMatrix::from_row_slice(3, 3, &[-0.5, 0.5, 0.0, 0.0, -0.5, 0.5, 0.0, 0.0, 0.0]);
        let dec = EigenDecomp::new(&q);
        assert!(!dec.accepted());
        let p = transition_matrix_with(&q, &dec, 2.0).unwrap();
        assert_relative_eq!(p, series(&q, 2.0), epsilon = 1e-12);
        let mut dq = DMatrix::zeros(3, 3);
        dq[(1, 2)] = 0.5;
        dq[(1, 1)] = -0.5;
        assert!(dp_dtheta(&dec, &dq, 2.0).is_err());
        let dp = dp_auto(&q, &dec, &dq, 2.0);
        // P22 = exp(-0.5 t): derivative wrt log q23 is -0.5 t exp(-0.5 t)
        assert_relative_eq!(dp[(1, 1)], -(-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn divided_difference_is_continuous_across_tie_threshold() {
        let a = C64::new(-0.7, 0.0);
        let t = 2.3;
        let tie = exp_divided_difference(a, a, t);
        for gap in [1e-9, 1e-7, 1e-5, 1e-3] {
            let b = C64::new(-0.7 - gap, 0.0);
            let v = exp_divided_difference(a, b, t);
            assert!((v - tie).norm() < 10.0 * gap * t * t);
        }
    }
}

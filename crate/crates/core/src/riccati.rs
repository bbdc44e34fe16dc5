//! Backward Riccati system for the LQ problem under a fixed volatility path.
//!
//! With `W = R + γ DᵀPD`, `M = B̃ᵀP + S + γ DᵀPC` and `K = W⁻¹M`:
//!
//! ```text
//! −Ṗ = PA + AᵀP + γ CᵀPC + Q − Mᵀ W⁻¹ M,                    P(T) = L
//! −φ̇ = (A − B̃K)ᵀφ + γ (C − DK)ᵀ P σ + P b,                   φ(T) = 0
//! −l̇ = ⟨φ, b⟩ + ½ γ ⟨Pσ, σ⟩ − ½ gᵀ W⁻¹ g,  g = B̃ᵀφ + γ DᵀPσ,  l(T) = 0
//! ```
//!
//! The three equations are integrated together with classical RK4 at a fixed
//! step. Scenario and coefficient breakpoints are inserted into the grid so
//! that every step sees constant coefficients.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, min_sym_eig};
use crate::problem::{
    Coefficients, FeedbackLaw, LQProblem, VolatilityScenario, DEFAULT_DELTA_PD, TIME_EPS,
};

pub const DEFAULT_N_STEPS: usize = 2000;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub phi: Vec<DVector<f64>>,
    pub l: Vec<f64>,
    pub gamma_used: VolatilityScenario,
}

impl RiccatiSolution {
    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let (j, w) = linalg::locate(&self.times, t);
        linalg::lerp_matrix(&self.p, j, w)
    }

    pub fn phi_at(&self, t: f64) -> DVector<f64> {
        let (j, w) = linalg::locate(&self.times, t);
        linalg::lerp_vector(&self.phi, j, w)
    }

    pub fn l_at(&self, t: f64) -> f64 {
        let (j, w) = linalg::locate(&self.times, t);
        linalg::lerp_scalar(&self.l, j, w)
    }

    /// `½⟨P(t)x, x⟩ + ⟨φ(t), x⟩ + l(t)`.
    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        let p = self.p_at(t);
        0.5 * x.dot(&(p * x)) + self.phi_at(t).dot(x) + self.l_at(t)
    }

    /// Value at `t = 0` from the initial state.
    pub fn initial_value(&self, x0: &DVector<f64>) -> f64 {
        0.5 * x0.dot(&(&self.p[0] * x0)) + self.phi[0].dot(x0) + self.l[0]
    }
}

/// Uniform grid of `n_steps` intervals on `[0, T]` refined by the given breakpoints.
pub fn ode_grid(horizon: f64, n_steps: usize, extra: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = crate::problem::uniform_breakpoints(horizon, n_steps.max(1));
    pts.extend(extra.iter().copied().filter(|t| *t > 0.0 && *t < horizon));
    linalg::merge_grids(pts, TIME_EPS * horizon)
}

struct Feedback {
    w_chol: Cholesky<f64, Dyn>,
    m: DMatrix<f64>,
}

fn feedback_parts(c: &Coefficients, gamma: f64, p: &DMatrix<f64>, t: f64) -> Result<Feedback> {
    let pd = p * &c.d;
    let w = &c.r + c.d.transpose() * &pd * gamma;
    let w = linalg::symmetrized(&w);
    let m = c.b_tilde.transpose() * p + &c.s + pd.transpose() * &c.c * gamma;
    let min_eig = min_sym_eig(&w);
    match Cholesky::new(w) {
        Some(w_chol) if min_eig > 0.0 => Ok(Feedback { w_chol, m }),
        _ => Err(Error::Singularity { time: t, min_eig }),
    }
}

/// Backward-time derivatives `(dP/dτ, dφ/dτ, dl/dτ)`, `τ = T − t`.
fn rhs(
    c: &Coefficients,
    gamma: f64,
    p: &DMatrix<f64>,
    phi: &DVector<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let fb = feedback_parts(c, gamma, p, t)?;
    let k = fb.w_chol.solve(&fb.m);
    let dp = p * &c.a + c.a.transpose() * p + c.c.transpose() * p * &c.c * gamma + &c.q
        - fb.m.transpose() * &k;

    let p_sigma = p * &c.sigma;
    let closed_a = &c.a - &c.b_tilde * &k;
    let closed_c = &c.c - &c.d * &k;
    let dphi = closed_a.transpose() * phi + closed_c.transpose() * &p_sigma * gamma + p * &c.b;

    let g = c.b_tilde.transpose() * phi + c.d.transpose() * &p_sigma * gamma;
    let w_inv_g = fb.w_chol.solve(&g);
    let dl = phi.dot(&c.b) + 0.5 * gamma * p_sigma.dot(&c.sigma) - 0.5 * g.dot(&w_inv_g);
    Ok((dp, dphi, dl))
}

/// Solves the Riccati, offset and scalar equations backward from `T`
/// with `δ_pd` = [`DEFAULT_DELTA_PD`].
pub fn solve_riccati(
    p: &LQProblem,
    scenario: &VolatilityScenario,
    n_steps: usize,
) -> Result<RiccatiSolution> {
    solve_riccati_with(p, scenario, n_steps, DEFAULT_DELTA_PD)
}

/// Positivity of `P` is enforced at `δ_pd` when `L ≫ 0`; for a semidefinite
/// `L` only `P ≥ −δ_pd` is required, so degenerate problems such as
/// `Q = S = L = 0` still solve.
pub fn solve_riccati_with(
    p: &LQProblem,
    scenario: &VolatilityScenario,
    n_steps: usize,
    delta_pd: f64,
) -> Result<RiccatiSolution> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be >= 1".into()));
    }
    if (scenario.horizon() - p.horizon).abs() > TIME_EPS * p.horizon {
        return Err(Error::Alignment(format!(
            "scenario horizon {} differs from problem horizon {}",
            scenario.horizon(),
            p.horizon
        )));
    }
    scenario.check_bounds(&p.bounds)?;

    let mut extra = p.breakpoints();
    extra.extend_from_slice(scenario.breakpoints());
    let times = ode_grid(p.horizon, n_steps, &extra);
    let nodes = times.len();

    let positivity_floor = if min_sym_eig(&p.l) >= delta_pd {
        delta_pd
    } else {
        -delta_pd
    };

    let mut ps = vec![DMatrix::zeros(p.n, p.n); nodes];
    let mut phis = vec![DVector::zeros(p.n); nodes];
    let mut ls = vec![0.0; nodes];
    ps[nodes - 1] = p.l.clone();

    // terminal node checks
    let t_end = times[nodes - 1];
    let c_end = p.coefficients_at(times[nodes - 2]);
    check_node(&c_end, scenario.gamma_at(times[nodes - 2]), &ps[nodes - 1], t_end, delta_pd, positivity_floor)?;

    for j in (0..nodes - 1).rev() {
        let (t0, t1) = (times[j], times[j + 1]);
        let h = t1 - t0;
        let mid = 0.5 * (t0 + t1);
        let c = p.coefficients_at(mid);
        let gamma = scenario.gamma_at(mid);

        let (p1, f1) = (&ps[j + 1], &phis[j + 1]);
        let (k1p, k1f, k1l) = rhs(&c, gamma, p1, f1, t1)?;
        let (k2p, k2f, k2l) = rhs(&c, gamma, &(p1 + &k1p * (0.5 * h)), &(f1 + &k1f * (0.5 * h)), mid)?;
        let (k3p, k3f, k3l) = rhs(&c, gamma, &(p1 + &k2p * (0.5 * h)), &(f1 + &k2f * (0.5 * h)), mid)?;
        let (k4p, k4f, k4l) = rhs(&c, gamma, &(p1 + &k3p * h), &(f1 + &k3f * h), t0)?;

        let mut p0 = p1 + (k1p + &k2p * 2.0 + &k3p * 2.0 + k4p) * (h / 6.0);
        linalg::symmetrize_in_place(&mut p0);
        let phi0 = f1 + (k1f + &k2f * 2.0 + &k3f * 2.0 + k4f) * (h / 6.0);
        let l0 = ls[j + 1] + (k1l + 2.0 * k2l + 2.0 * k3l + k4l) * (h / 6.0);

        if !linalg::all_finite(&p0) || !phi0.iter().all(|v| v.is_finite()) || !l0.is_finite() {
            return Err(Error::NonFinite { time: t0 });
        }
        check_node(&c, gamma, &p0, t0, delta_pd, positivity_floor)?;
        ps[j] = p0;
        phis[j] = phi0;
        ls[j] = l0;
    }

    Ok(RiccatiSolution {
        times,
        p: ps,
        phi: phis,
        l: ls,
        gamma_used: scenario.clone(),
    })
}

fn check_node(
    c: &Coefficients,
    gamma: f64,
    p: &DMatrix<f64>,
    t: f64,
    delta_pd: f64,
    positivity_floor: f64,
) -> Result<()> {
    let min_p = min_sym_eig(p);
    if !(min_p >= positivity_floor) {
        return Err(Error::PositivityLoss { time: t, min_eig: min_p });
    }
    let w = &c.r + c.d.transpose() * p * &c.d * gamma;
    let min_w = min_sym_eig(&w);
    if !(min_w >= delta_pd) {
        return Err(Error::Singularity { time: t, min_eig: min_w });
    }
    Ok(())
}

/// Gain `K = W⁻¹(B̃ᵀP + S + γDᵀPC)` and offset `k = W⁻¹(B̃ᵀφ + γDᵀPσ)` on
/// the Riccati grid, so that `u = −K x − k`.
pub fn optimal_feedback(p: &LQProblem, ric: &RiccatiSolution) -> Result<FeedbackLaw> {
    let nodes = ric.times.len();
    let mut gains = Vec::with_capacity(nodes);
    let mut offsets = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let t = ric.times[j];
        // coefficients of the step that starts at t (the last node uses the final step)
        let probe = if j + 1 < nodes {
            0.5 * (t + ric.times[j + 1])
        } else {
            0.5 * (ric.times[j - 1] + t)
        };
        let c = p.coefficients_at(probe);
        let gamma = ric.gamma_used.gamma_at(probe);
        let (k, off) = gain_and_offset(&c, gamma, &ric.p[j], &ric.phi[j], t)?;
        gains.push(k);
        offsets.push(off);
    }
    FeedbackLaw::new(ric.times.clone(), gains, offsets)
}

pub(crate) fn gain_and_offset(
    c: &Coefficients,
    gamma: f64,
    p: &DMatrix<f64>,
    phi: &DVector<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let fb = feedback_parts(c, gamma, p, t)?;
    let g = c.b_tilde.transpose() * phi + c.d.transpose() * (p * &c.sigma) * gamma;
    Ok((fb.w_chol.solve(&fb.m), fb.w_chol.solve(&g)))
}

/// Adjoint processes of the LQ problem along one trajectory.
///
/// The orthogonal martingale part of the adjoint equation is identically zero
/// for this construction; [`AdjointPath::orthogonal_martingale`] reports it.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub times: Vec<f64>,
    /// `p = P x̄ + φ`
    pub p: Vec<DVector<f64>>,
    /// `q = P(C x̄ + D ū + σ)`
    pub q: Vec<DVector<f64>>,
    /// `q` from the closed feedback form (with `ū` substituted from `P`, `φ`).
    pub q_closed_form: Vec<DVector<f64>>,
    pub max_discrepancy: f64,
}

impl AdjointPath {
    pub fn orthogonal_martingale(&self, _t: f64) -> f64 {
        0.0
    }
}

/// Adjoint pair computed without checking the two `q` forms against each other.
pub(crate) fn adjoint_unchecked(
    problem: &LQProblem,
    ric: &RiccatiSolution,
    times: &[f64],
    xbar: &[DVector<f64>],
    ubar: &[DVector<f64>],
) -> Result<AdjointPath> {
    if xbar.len() != times.len() || ubar.len() != times.len() {
        return Err(Error::DimensionMismatch {
            name: "adjoint paths".into(),
            expected: format!("{} nodes", times.len()),
            found: format!("x: {}, u: {}", xbar.len(), ubar.len()),
        });
    }
    let mut out = AdjointPath {
        times: times.to_vec(),
        p: Vec::with_capacity(times.len()),
        q: Vec::with_capacity(times.len()),
        q_closed_form: Vec::with_capacity(times.len()),
        max_discrepancy: 0.0,
    };
    for (k, &t) in times.iter().enumerate() {
        let pm = ric.p_at(t);
        let phi = ric.phi_at(t);
        let probe = step_probe(times, k);
        let c = problem.coefficients_at(probe);
        let gamma = ric.gamma_used.gamma_at(probe);
        let x = &xbar[k];
        let p_val = &pm * x + &phi;
        let q_ito = &pm * (&c.c * x + &c.d * &ubar[k] + &c.sigma);

        let fb = feedback_parts(&c, gamma, &pm, t)?;
        let g = c.b_tilde.transpose() * &phi + c.d.transpose() * (&pm * &c.sigma) * gamma;
        let pd = &pm * &c.d;
        let q_closed = (&pm * &c.c - &pd * fb.w_chol.solve(&fb.m)) * x - &pd * fb.w_chol.solve(&g)
            + &pm * &c.sigma;

        let scale = 1.0 + linalg::max_abs_vec(&q_ito);
        out.max_discrepancy = out
            .max_discrepancy
            .max(linalg::max_abs_vec(&(&q_ito - &q_closed)) / scale);
        out.p.push(p_val);
        out.q.push(q_ito);
        out.q_closed_form.push(q_closed);
    }
    Ok(out)
}

/// Time at which to read the piecewise coefficients for node `k`: inside the
/// step starting at `times[k]`, or the last step for the terminal node.
pub(crate) fn step_probe(times: &[f64], k: usize) -> f64 {
    if k + 1 < times.len() {
        0.5 * (times[k] + times[k + 1])
    } else if k > 0 {
        0.5 * (times[k - 1] + times[k])
    } else {
        times[0]
    }
}

/// Default relative tolerance for agreement of the two `q` forms.
pub const ADJOINT_TOL: f64 = 1e-8;

/// `p = P x̄ + φ` and `q = P(C x̄ + D ū + σ)` along a trajectory; fails when
/// the closed feedback form of `q` disagrees by more than `tol` (relative).
pub fn adjoint_from_riccati(
    problem: &LQProblem,
    ric: &RiccatiSolution,
    times: &[f64],
    xbar: &[DVector<f64>],
    ubar: &[DVector<f64>],
    tol: f64,
) -> Result<AdjointPath> {
    let adj = adjoint_unchecked(problem, ric, times, xbar, ubar)?;
    if adj.max_discrepancy > tol {
        let (k, d) = adj
            .q
            .iter()
            .zip(&adj.q_closed_form)
            .map(|(a, b)| linalg::max_abs_vec(&(a - b)) / (1.0 + linalg::max_abs_vec(a)))
            .enumerate()
            .fold((0, 0.0), |acc, (k, d)| if d > acc.1 { (k, d) } else { acc });
        return Err(Error::Inconsistency {
            time: adj.times[k],
            discrepancy: d,
            tol,
        });
    }
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{mat1, vec1, AmbiguityBounds};

    fn bounds() -> AmbiguityBounds {
        AmbiguityBounds::new(1.0, 0.5).unwrap()
    }

    /// `A=C=D=S=Q=0`, `B̃=R=L=1`, `T=1`: `P(t) = 1/(1+T−t)`.
    fn closed_form_problem() -> LQProblem {
        LQProblem::builder(1, 1, 1.0, bounds())
            .b_tilde(mat1(1.0))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .x0(vec1(1.0))
            .build()
            .unwrap()
    }

    fn sbar(p: &LQProblem) -> VolatilityScenario {
        VolatilityScenario::constant(p.horizon, p.bounds.sigma_bar_sq()).unwrap()
    }

    #[test]
    fn closed_form_scalar_riccati() {
        let p = closed_form_problem();
        let ric = solve_riccati(&p, &sbar(&p), 2000).unwrap();
        assert_eq!(ric.p.last().unwrap()[(0, 0)], 1.0);
        for (t, pm) in ric.times.iter().zip(&ric.p) {
            let exact = 1.0 / (2.0 - t);
            assert!((pm[(0, 0)] - exact).abs() < 1e-12, "t={t}");
        }
        assert!((ric.p[0][(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_costs_give_zero_riccati() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .a(mat1(0.3))
            .b_tilde(mat1(1.0))
            .b(vec1(0.5))
            .sigma(vec1(0.7))
            .r(mat1(1.0))
            .build()
            .unwrap();
        let ric = solve_riccati(&p, &sbar(&p), 200).unwrap();
        assert!(ric.p.iter().all(|m| m[(0, 0)] == 0.0));
        assert!(ric.phi.iter().all(|v| v[0] == 0.0));
        assert!(ric.l.iter().all(|v| *v == 0.0));
        let fb = optimal_feedback(&p, &ric).unwrap();
        assert!(fb.gain.iter().all(|k| k[(0, 0)] == 0.0));
        assert!(fb.offset.iter().all(|k| k[0] == 0.0));
    }

    #[test]
    fn gain_at_time_zero_matches_formula() {
        let p = closed_form_problem();
        let ric = solve_riccati(&p, &sbar(&p), 2000).unwrap();
        let fb = optimal_feedback(&p, &ric).unwrap();
        assert!((fb.gain[0][(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gain_without_d_ignores_gamma() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .a(mat1(0.2))
            .b_tilde(mat1(1.0))
            .c(mat1(0.4))
            .q(mat1(1.0))
            .r(mat1(2.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        let ric = solve_riccati(&p, &sbar(&p), 400).unwrap();
        let fb = optimal_feedback(&p, &ric).unwrap();
        for (k, pm) in fb.gain.iter().zip(&ric.p) {
            assert!((k[(0, 0)] - pm[(0, 0)] / 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_terminal_and_initial_values() {
        let p = closed_form_problem();
        let ric = solve_riccati(&p, &sbar(&p), 2000).unwrap();
        let fb = optimal_feedback(&p, &ric).unwrap();
        let times = vec![0.0, 1.0];
        let xs = vec![vec1(1.0), vec1(0.5)];
        let us: Vec<_> = times.iter().zip(&xs).map(|(t, x)| fb.eval(*t, x)).collect();
        let adj = adjoint_from_riccati(&p, &ric, &times, &xs, &us, ADJOINT_TOL).unwrap();
        assert!((adj.p[0][0] - 0.5).abs() < 1e-12);
        assert!((adj.p[1][0] - 0.5).abs() < 1e-15); // L x(T)
        assert_eq!(adj.orthogonal_martingale(0.3), 0.0);
    }

    #[test]
    fn adjoint_forms_disagree_for_foreign_control_when_d_nonzero() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .b_tilde(mat1(1.0))
            .d(mat1(0.5))
            .q(mat1(1.0))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        let ric = solve_riccati(&p, &sbar(&p), 100).unwrap();
        let times = vec![0.0];
        let xs = vec![vec1(1.0)];
        let us = vec![vec1(3.0)];
        let err = adjoint_from_riccati(&p, &ric, &times, &xs, &us, ADJOINT_TOL).unwrap_err();
        assert!(matches!(err, Error::Inconsistency { .. }));
    }

    #[test]
    fn scenario_breakpoints_enter_the_grid() {
        let p = closed_form_problem();
        let s = VolatilityScenario::new(vec![0.0, 0.123, 1.0], vec![0.5, 1.0]).unwrap();
        let ric = solve_riccati(&p, &s, 10).unwrap();
        assert!(ric.times.iter().any(|t| (*t - 0.123).abs() < 1e-15));
        assert_eq!(ric.times.len(), 12);
    }

    #[test]
    fn coarse_steps_on_stiff_problem_lose_positivity() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .b_tilde(mat1(1.0))
            .q(mat1(1e4))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        match solve_riccati(&p, &sbar(&p), 10) {
            Err(Error::PositivityLoss { time, .. }) => assert!(time < 1.0),
            other => panic!("expected positivity loss, got {other:?}"),
        }
        assert!(solve_riccati(&p, &sbar(&p), 2000).is_ok());
    }

    #[test]
    fn singular_denominator_is_reported() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .b_tilde(mat1(1.0))
            .r(mat1(0.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        assert!(matches!(
            solve_riccati(&p, &sbar(&p), 10),
            Err(Error::Singularity { .. })
        ));
    }
}

//! Numerical checks of the stochastic maximum principle on LQ instances.
//!
//! The reference measure is the constant scenario `γ ≡ σ̄²`. The adjoint pair
//! is read off the Riccati solution (`p = P x̄ + φ`, `q = P(C x̄ + D ū + σ)`).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{Coefficients, FeedbackControl, FeedbackLaw, LQProblem, VolatilityScenario};
use crate::riccati::{self, RiccatiSolution};
use crate::robust::{self, RobustConfig, ScenarioFamily};
use crate::sim::{self, mean_stderr, SimConfig, SimPlan};

/// Default finite-difference ladder for Gâteaux quotients.
pub const DEFAULT_RHO_LADDER: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

/// `H`, `H_x`, `H_u` at every node of every path.
#[derive(Debug, Clone)]
pub struct HamiltonianEval {
    pub times: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub h_x: Vec<Vec<DVector<f64>>>,
    pub h_u: Vec<Vec<DVector<f64>>>,
    /// Trajectory the Hamiltonian was evaluated on.
    pub x: Vec<Vec<DVector<f64>>>,
    pub u: Vec<Vec<DVector<f64>>>,
    pub max_abs_h_u: f64,
}

struct HamiltonianAt {
    h: f64,
    h_x: DVector<f64>,
    h_u: DVector<f64>,
}

/// `H = ⟨p, Ax + B̃u + b⟩ + ⟨q, Cx + Du + σ⟩γ + ½(⟨Qx,x⟩ + 2⟨Sx,u⟩ + ⟨Ru,u⟩)`
/// and its partial gradients.
fn hamiltonian_at(
    c: &Coefficients,
    gamma: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> HamiltonianAt {
    let drift = &c.a * x + &c.b_tilde * u + &c.b;
    let diff = &c.c * x + &c.d * u + &c.sigma;
    let sx = &c.s * x;
    let h = p.dot(&drift)
        + q.dot(&diff) * gamma
        + 0.5 * ((&c.q * x).dot(x) + 2.0 * sx.dot(u) + (&c.r * u).dot(u));
    let h_x = c.a.transpose() * p + c.c.transpose() * q * gamma + &c.q * x + c.s.transpose() * u;
    let h_u = c.b_tilde.transpose() * p + c.d.transpose() * q * gamma + sx + &c.r * u;
    HamiltonianAt { h, h_x, h_u }
}

/// Hamiltonian along paths of `ctrl` under `scenario`, with `p`, `q` from `ric`.
pub fn hamiltonian_eval(
    p: &LQProblem,
    ric: &RiccatiSolution,
    ctrl: &FeedbackControl,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<HamiltonianEval> {
    let bundle = sim::simulate(p, ctrl, scenario, cfg)?;
    let times = bundle.times.clone();
    let coefs: Vec<(Coefficients, f64)> = (0..times.len())
        .map(|k| {
            let probe = riccati::step_probe(&times, k);
            (p.coefficients_at(probe), scenario.gamma_at(probe))
        })
        .collect();
    let per_path: Vec<Result<(Vec<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>)>> = (0..bundle.x.len())
        .into_par_iter()
        .map(|i| {
            let adj = riccati::adjoint_unchecked(p, ric, &times, &bundle.x[i], &bundle.u[i])?;
            let mut h = Vec::with_capacity(times.len());
            let mut hx = Vec::with_capacity(times.len());
            let mut hu = Vec::with_capacity(times.len());
            for k in 0..times.len() {
                let (c, g) = &coefs[k];
                let e = hamiltonian_at(c, *g, &bundle.x[i][k], &bundle.u[i][k], &adj.p[k], &adj.q[k]);
                h.push(e.h);
                hx.push(e.h_x);
                hu.push(e.h_u);
            }
            Ok((h, hx, hu))
        })
        .collect();
    let mut out = HamiltonianEval {
        times,
        h: Vec::new(),
        h_x: Vec::new(),
        h_u: Vec::new(),
        x: bundle.x,
        u: bundle.u,
        max_abs_h_u: 0.0,
    };
    for r in per_path {
        let (h, hx, hu) = r?;
        for v in &hu {
            out.max_abs_h_u = out.max_abs_h_u.max(linalg::max_abs_vec(v));
        }
        out.h.push(h);
        out.h_x.push(hx);
        out.h_u.push(hu);
    }
    if !out.max_abs_h_u.is_finite() {
        return Err(Error::NonFinite { time: 0.0 });
    }
    Ok(out)
}

/// `max |H_u|` along the optimal feedback of `ric` under `γ ≡ σ̄²`.
pub fn hamiltonian_stationarity(p: &LQProblem, ric: &RiccatiSolution, cfg: &SimConfig) -> Result<f64> {
    let law = riccati::optimal_feedback(p, ric)?;
    let scenario = VolatilityScenario::constant(p.horizon, p.bounds.sigma_bar_sq())?;
    Ok(hamiltonian_eval(p, ric, &FeedbackControl::Feedback(law), &scenario, cfg)?.max_abs_h_u)
}

/// `min_{u ∈ [lo, hi]} ⟨H_u, u − ū⟩ = Σᵢ min(H_uᵢ (loᵢ − ūᵢ), H_uᵢ (hiᵢ − ūᵢ))`.
/// Nonnegative exactly when `ū` satisfies the maximum-principle inequality on the box.
pub fn box_residual(h_u: &DVector<f64>, ubar: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (0..h_u.len())
        .map(|i| (h_u[i] * (lo[i] - ubar[i])).min(h_u[i] * (hi[i] - ubar[i])))
        .sum()
}

/// Smallest [`box_residual`] over all nodes and paths of `eval`.
pub fn box_check(eval: &HamiltonianEval, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut worst = f64::INFINITY;
    for (hus, us) in eval.h_u.iter().zip(&eval.u) {
        for (hu, u) in hus.iter().zip(us) {
            worst = worst.min(box_residual(hu, u, lo, hi));
        }
    }
    worst
}

/// `m(t) = exp ∫₀ᵗ f_y ds` on `times` (trapezoid in the exponent).
pub fn multiplier(times: &[f64], f_y: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(1.0);
    for k in 1..times.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (f_y[k - 1] + f_y[k]);
        out.push(acc.exp());
    }
    out
}

/// `m(T) terminal + ∫ m(t) running(t) dt` (trapezoid).
pub fn weighted_theta(times: &[f64], m: &[f64], terminal: f64, running: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 1..times.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (m[k - 1] * running[k - 1] + m[k] * running[k]);
    }
    m[times.len() - 1] * terminal + acc
}

/// Per-path samples of `Θ = ⟨L x̄(T), x̂(T)⟩ + ∫ [⟨Qx̄ + Sᵀū, x̂⟩ + ⟨Sx̄ + Rū, w⟩] dt`
/// where `w = w_law(x̄)` and `x̂` solves the variational equation driven by `w`
/// with the same Brownian increments as `x̄`.
///
/// Discretized consistently with the simulator, so `Θ` is the exact
/// `ρ`-derivative at 0 of each sampled cost of `ū + ρ w`.
pub fn theta_samples(
    p: &LQProblem,
    base: &FeedbackLaw,
    w_law: &FeedbackLaw,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let bundle = sim::simulate(p, &FeedbackControl::Feedback(base.clone()), scenario, cfg)?;
    let times = &bundle.times;
    let n_steps = times.len() - 1;
    let steps: Vec<Coefficients> = times
        .windows(2)
        .map(|w| p.coefficients_at(0.5 * (w[0] + w[1])))
        .collect();
    let w_nodes: Vec<(DMatrix<f64>, DVector<f64>)> =
        times.iter().map(|&t| (w_law.gain_at(t), w_law.offset_at(t))).collect();
    let samples = (0..bundle.x.len())
        .into_par_iter()
        .map(|i| {
            let xs = &bundle.x[i];
            let us = &bundle.u[i];
            let w: Vec<DVector<f64>> = (0..times.len())
                .map(|k| -(&w_nodes[k].0 * &xs[k]) - &w_nodes[k].1)
                .collect();
            let mut xh = DVector::zeros(p.n);
            // both ends of a step use that step's coefficients
            let mut acc = 0.0;
            for k in 0..n_steps {
                let c = &steps[k];
                let h = times[k + 1] - times[k];
                let left = grad_dot(c, &xs[k], &us[k], &xh, &w[k]);
                let xh_next = &xh
                    + (&c.a * &xh + &c.b_tilde * &w[k]) * h
                    + (&c.c * &xh + &c.d * &w[k]) * bundle.db[i][k];
                let right = grad_dot(c, &xs[k + 1], &us[k + 1], &xh_next, &w[k + 1]);
                acc += 0.5 * h * (left + right);
                xh = xh_next;
            }
            // m ≡ 1 for the LQ driver
            (&p.l * &xs[n_steps]).dot(&xh) + acc
        })
        .collect();
    Ok(samples)
}

/// `⟨Qx + Sᵀu, x̂⟩ + ⟨Sx + Ru, w⟩`.
fn grad_dot(c: &Coefficients, x: &DVector<f64>, u: &DVector<f64>, xh: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (&c.q * x + c.s.transpose() * u).dot(xh) + (&c.s * x + &c.r * u).dot(w)
}

#[derive(Debug, Clone)]
pub struct VariationalInequality {
    /// `(mean, stderr)` of `E[Θ^v]` for each direction.
    pub per_direction: Vec<(f64, f64)>,
    pub min_mean: f64,
    /// Stderr of the direction attaining `min_mean`.
    pub min_stderr: f64,
}

/// `E_{σ̄²}[Θ^v]` for each direction `v` around the optimal feedback of `ric`.
pub fn variational_inequality_check(
    p: &LQProblem,
    ric: &RiccatiSolution,
    directions: &[FeedbackLaw],
    cfg: &SimConfig,
) -> Result<VariationalInequality> {
    if directions.is_empty() {
        return Err(Error::InvalidInput("no directions given".into()));
    }
    let base = riccati::optimal_feedback(p, ric)?;
    let scenario = VolatilityScenario::constant(p.horizon, p.bounds.sigma_bar_sq())?;
    let mut per_direction = Vec::with_capacity(directions.len());
    for v in directions {
        let w = v.combine(1.0, &base, -1.0)?;
        let s = theta_samples(p, &base, &w, &scenario, cfg)?;
        per_direction.push(mean_stderr(&s, cfg.antithetic));
    }
    let (min_mean, min_stderr) = per_direction
        .iter()
        .copied()
        .fold((f64::INFINITY, 0.0), |acc, r| if r.0 < acc.0 { r } else { acc });
    Ok(VariationalInequality {
        per_direction,
        min_mean,
        min_stderr,
    })
}

/// Finite-difference Gâteaux quotients of the robust cost.
#[derive(Debug, Clone)]
pub struct VariationalReport {
    pub rho_ladder: Vec<f64>,
    pub base_value: f64,
    pub values: Vec<f64>,
    /// `(J(ū + ρ v) − J(ū)) / ρ`.
    pub quotients: Vec<f64>,
    /// Stderr of each quotient from paired per-path differences.
    pub quotient_stderr: Vec<f64>,
    /// Richardson extrapolation of the last two quotients to `ρ = 0`.
    pub limit: f64,
    pub limit_stderr: f64,
    /// `E[Θ^v]` under the worst-case scenario of `ū`.
    pub theta_estimate: f64,
    pub theta_stderr: f64,
    pub agreement_tol: f64,
    pub agrees: bool,
    /// Largest increase of the quotient as `ρ` shrinks, minus its stderr
    /// (`≤ 0` means nonincreasing within stderr).
    pub monotonicity_excess: f64,
    pub multiplier_note: &'static str,
}

/// Quotients `(J(ū+ρv) − J(ū))/ρ` of the robust cost over `family` with
/// common random numbers, compared with `E[Θ^v]` under the worst case of `ū`.
pub fn gateaux_check(
    p: &LQProblem,
    base: &FeedbackLaw,
    direction: &FeedbackLaw,
    rho_ladder: &[f64],
    family: &ScenarioFamily,
    cfg: &RobustConfig,
) -> Result<VariationalReport> {
    if rho_ladder.len() < 2
        || rho_ladder.iter().any(|r| !(*r > 0.0))
        || rho_ladder.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidInput(
            "rho ladder must hold at least two strictly decreasing positive values".into(),
        ));
    }
    // ū + ρ v = ū + ρ((ū + v) − ū)
    let target = base.combine(1.0, direction, 1.0)?;
    let base_ctrl = FeedbackControl::Feedback(base.clone());
    let base_res = robust::robust_cost(p, &base_ctrl, family, cfg)?;
    let probe = base_res.argmax_scenario.clone();
    let base_plan = SimPlan::new(p, &base_ctrl, &cfg.sim, Some(&probe))?;

    let mut values = Vec::new();
    let mut quotients = Vec::new();
    let mut quotient_stderr = Vec::new();
    for &rho in rho_ladder {
        let ctrl = FeedbackControl::Perturbed {
            base: base.clone(),
            direction: target.clone(),
            rho,
        };
        let res = robust::robust_cost(p, &ctrl, family, cfg)?;
        let plan = SimPlan::new(p, &ctrl, &cfg.sim, Some(&probe))?;
        let a = plan.path_costs(&res.argmax_scenario)?;
        let b = base_plan.path_costs(&res.argmax_scenario)?;
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / rho).collect();
        values.push(res.value);
        quotients.push((res.value - base_res.value) / rho);
        quotient_stderr.push(mean_stderr(&diffs, cfg.sim.antithetic).1);
    }

    let k = rho_ladder.len();
    let (r1, r2) = (rho_ladder[k - 2], rho_ladder[k - 1]);
    let (q1, q2) = (quotients[k - 2], quotients[k - 1]);
    let limit = (r1 * q2 - r2 * q1) / (r1 - r2);
    let amp = (r1.abs() + r2.abs()) / (r1 - r2);
    let limit_stderr = amp * quotient_stderr[k - 2].max(quotient_stderr[k - 1]);

    let theta = theta_samples(p, base, direction, &base_res.argmax_scenario, &cfg.sim)?;
    let (theta_estimate, theta_stderr) = mean_stderr(&theta, cfg.sim.antithetic);
    let slope = (q1 - q2).abs() / (r1 - r2);
    let agreement_tol = 3.0 * (limit_stderr + theta_stderr) + r2 * (1.0 + slope);
    let monotonicity_excess = quotients
        .windows(2)
        .zip(quotient_stderr.windows(2))
        .map(|(q, se)| q[1] - q[0] - se[0].max(se[1]))
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(VariationalReport {
        rho_ladder: rho_ladder.to_vec(),
        base_value: base_res.value,
        values,
        quotients,
        quotient_stderr,
        limit,
        limit_stderr,
        theta_estimate,
        theta_stderr,
        agreement_tol,
        agrees: (limit - theta_estimate).abs() <= agreement_tol,
        monotonicity_excess,
        multiplier_note: "m ≡ 1 (the LQ driver does not depend on y)",
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityCheck {
    pub condition: &'static str,
    pub time: Option<f64>,
    pub min_eig: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport {
    pub checks: Vec<ConvexityCheck>,
    pub pass: bool,
}

/// Convexity premises of the sufficient condition: `[[Q, Sᵀ], [S, R]] ≥ 0` at
/// every coefficient breakpoint and `L ≥ 0`, each to within `−delta`.
pub fn sufficient_condition_check(p: &LQProblem, delta: f64) -> SufficiencyReport {
    let (n, m) = (p.n, p.m);
    let mut checks = Vec::new();
    for t in p.breakpoints() {
        if t >= p.horizon {
            continue;
        }
        let c = p.coefficients_at(t);
        let mut block = DMatrix::zeros(n + m, n + m);
        block.view_mut((0, 0), (n, n)).copy_from(&c.q);
        block.view_mut((0, n), (n, m)).copy_from(&c.s.transpose());
        block.view_mut((n, 0), (m, n)).copy_from(&c.s);
        block.view_mut((n, n), (m, m)).copy_from(&c.r);
        let e = linalg::min_sym_eig(&linalg::symmetrized(&block));
        checks.push(ConvexityCheck {
            condition: "[[Q, Sᵀ], [S, R]] ≥ 0",
            time: Some(t),
            min_eig: e,
            pass: e >= -delta,
        });
    }
    let e = linalg::min_sym_eig(&linalg::symmetrized(&p.l));
    checks.push(ConvexityCheck {
        condition: "L ≥ 0",
        time: None,
        min_eig: e,
        pass: e >= -delta,
    });
    let pass = checks.iter().all(|c| c.pass);
    SufficiencyReport { checks, pass }
}

/// Directions used when none are supplied: `ū ± eᵢ` shifts of the offset and
/// a 20% larger gain.
pub fn default_directions(base: &FeedbackLaw, m: usize) -> Vec<FeedbackLaw> {
    let mut out = Vec::new();
    for i in 0..m {
        for sign in [1.0, -1.0] {
            out.push(base.map(
                |g| g.clone(),
                |o| {
                    let mut o = o.clone();
                    o[i] -= sign;
                    o
                },
            ));
        }
    }
    out.push(base.map(|g| g * 1.2, |o| o.clone()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{mat1, vec1, AmbiguityBounds};

    fn scalar() -> LQProblem {
        LQProblem::builder(1, 1, 1.0, AmbiguityBounds::new(1.0, 0.5).unwrap())
            .b_tilde(mat1(1.0))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .x0(vec1(1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn block_convexity_examples() {
        let b = AmbiguityBounds::new(1.0, 0.5).unwrap();
        let good = LQProblem::builder(1, 1, 1.0, b)
            .q(mat1(1.0))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        assert!(sufficient_condition_check(&good, 1e-8).pass);
        let bad = LQProblem::builder(1, 1, 1.0, b)
            .s(mat1(1.0))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .build()
            .unwrap();
        let r = sufficient_condition_check(&bad, 1e-8);
        assert!(!r.pass);
        let want = (1.0 - 5f64.sqrt()) / 2.0;
        assert!((r.checks[0].min_eig - want).abs() < 1e-12);
    }

    #[test]
    fn multiplier_of_constant_rate() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let m = multiplier(&times, &[0.3; 11]);
        for (t, v) in times.iter().zip(&m) {
            assert!((v - (0.3 * t).exp()).abs() < 1e-14);
        }
        // ∫₀¹ e^{0.3t} dt with a constant integrand of 1, plus m(1)·2
        let th = weighted_theta(&times, &m, 2.0, &[1.0; 11]);
        let exact = 2.0 * 0.3f64.exp() + (0.3f64.exp() - 1.0) / 0.3;
        assert!((th - exact).abs() < 1e-3);
    }

    #[test]
    fn box_residual_signs() {
        let lo = vec1(-1.0);
        let hi = vec1(1.0);
        // interior point with nonzero gradient violates the inequality
        assert!(box_residual(&vec1(0.5), &vec1(0.0), &lo, &hi) < 0.0);
        // at the lower face with positive gradient the inequality holds
        assert!(box_residual(&vec1(0.5), &vec1(-1.0), &lo, &hi) >= 0.0);
        assert_eq!(box_residual(&vec1(0.0), &vec1(0.3), &lo, &hi), 0.0);
    }

    #[test]
    fn stationarity_at_optimum_and_away() {
        let p = scalar();
        let sbar = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let ric = riccati::solve_riccati(&p, &sbar, 200).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(4).with_steps(1.0, 200);
        assert!(hamiltonian_stationarity(&p, &ric, &cfg).unwrap() < 1e-12);

        let law = riccati::optimal_feedback(&p, &ric).unwrap();
        let bumped = law.map(|g| g.add_scalar(0.1), |o| o.clone());
        let e = hamiltonian_eval(&p, &ric, &FeedbackControl::Feedback(bumped), &sbar, &cfg).unwrap();
        // H_u = −0.1·R·x at the first node
        assert!((e.h_u[0][0][0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_has_zero_theta() {
        let p = scalar();
        let sbar = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let ric = riccati::solve_riccati(&p, &sbar, 100).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(8).with_steps(1.0, 100);
        let law = riccati::optimal_feedback(&p, &ric).unwrap();
        let r = variational_inequality_check(&p, &ric, &[law], &cfg).unwrap();
        assert_eq!(r.per_direction[0], (0.0, 0.0));
    }
}

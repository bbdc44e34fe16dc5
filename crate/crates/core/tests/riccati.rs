use glq_core::corpus;
use glq_core::linalg::min_sym_eig;
use glq_core::problem::{mat1, vec1};
use glq_core::riccati::{optimal_feedback, solve_riccati};
use glq_core::{AmbiguityBounds, LQProblem, VolatilityScenario};
use nalgebra::DMatrix;

fn bounds() -> AmbiguityBounds {
    AmbiguityBounds::new(1.0, 0.5).unwrap()
}

fn sbar() -> VolatilityScenario {
    VolatilityScenario::constant(1.0, 1.0).unwrap()
}

/// `A = C = D = S = Q = 0`, `B̃ = R = L = 1`, `T = 1`: `P(t) = 1/(2 − t)`.
fn closed_form(b: f64, sigma: f64) -> LQProblem {
    LQProblem::builder(1, 1, 1.0, bounds())
        .b_tilde(mat1(1.0))
        .r(mat1(1.0))
        .l(mat1(1.0))
        .b(vec1(b))
        .sigma(vec1(sigma))
        .x0(vec1(1.0))
        .build()
        .unwrap()
}

fn max_p_error(n: usize) -> f64 {
    let ric = solve_riccati(&closed_form(0.0, 0.0), &sbar(), n).unwrap();
    ric.times
        .iter()
        .zip(&ric.p)
        .map(|(t, p)| (p[(0, 0)] - 1.0 / (2.0 - t)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_form_riccati_at_default_steps() {
    assert!(max_p_error(2000) <= 1e-8);
}

#[test]
fn rk4_order_against_closed_form() {
    let e: Vec<f64> = [4usize, 8, 16].iter().map(|&n| max_p_error(n)).collect();
    for w in e.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 3.5, "errors {e:?}");
    }
}

#[test]
fn offset_and_constant_closed_forms() {
    // φ(t) = b(1 − P(t)); for b = 0, l(t) = ½σ̄²s² ln(2 − t)
    let (b, s) = (0.3, 0.7);
    let ric = solve_riccati(&closed_form(b, s), &sbar(), 2000).unwrap();
    for (t, phi) in ric.times.iter().zip(&ric.phi) {
        let want = b * (1.0 - 1.0 / (2.0 - t));
        assert!((phi[0] - want).abs() < 1e-10, "t={t}");
    }
    // with b = 0 the constant term is pure noise compensation
    let ric = solve_riccati(&closed_form(0.0, s), &sbar(), 2000).unwrap();
    let want = 0.5 * s * s * 2f64.ln();
    assert!((ric.l[0] - want).abs() < 1e-10);
}

#[test]
fn constant_term_with_drift_matches_quadrature() {
    // −l̇ = φ b + ½γ P s² − ½ φ² for this instance (g = φ since B̃ = 1, D = 0).
    let (b, s) = (0.3, 0.7);
    let ric = solve_riccati(&closed_form(b, s), &sbar(), 2000).unwrap();
    let n = 100_000;
    let h = 1.0 / n as f64;
    let mut l0 = 0.0;
    for i in 0..n {
        let t = (i as f64 + 0.5) * h;
        let p = 1.0 / (2.0 - t);
        let phi = b * (1.0 - p);
        l0 += (phi * b + 0.5 * p * s * s - 0.5 * phi * phi) * h;
    }
    assert!((ric.l[0] - l0).abs() < 1e-9, "{} vs {l0}", ric.l[0]);
}

/// Right-hand side of the forward Riccati flow `Ṗ = −(PA + AᵀP + γCᵀPC + Q − MᵀW⁻¹M)`.
fn riccati_forward_rhs(p: &LQProblem, pm: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let c = p.coefficients_at(0.5);
    let w = &c.r + c.d.transpose() * pm * &c.d * gamma;
    let m = c.b_tilde.transpose() * pm + &c.s + c.d.transpose() * pm * &c.c * gamma;
    let winv = w.try_inverse().unwrap();
    -(pm * &c.a + c.a.transpose() * pm + c.c.transpose() * pm * &c.c * gamma + &c.q
        - m.transpose() * winv * m)
}

#[test]
fn forward_reintegration_recovers_terminal_weight() {
    for seed in 0..5 {
        let p = corpus::random_instance(seed, 2, 1);
        let ric = solve_riccati(&p, &sbar(), 2000).unwrap();
        let mut pm = ric.p[0].clone();
        for w in ric.times.windows(2) {
            let h = w[1] - w[0];
            let k1 = riccati_forward_rhs(&p, &pm, 1.0);
            let k2 = riccati_forward_rhs(&p, &(&pm + &k1 * (h / 2.0)), 1.0);
            let k3 = riccati_forward_rhs(&p, &(&pm + &k2 * (h / 2.0)), 1.0);
            let k4 = riccati_forward_rhs(&p, &(&pm + &k3 * h), 1.0);
            pm += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let err = (&pm - &p.l).abs().max();
        assert!(err < 1e-9, "seed {seed}: {err}");
    }
}

#[test]
fn step_halving_order_on_random_instances() {
    for seed in 0..5 {
        let p = corpus::random_instance(seed, 2, 1);
        let p0 = |n: usize| solve_riccati(&p, &sbar(), n).unwrap().p[0].clone();
        let (a, b, c) = (p0(4), p0(8), p0(16));
        let reference = p0(1024);
        let e1 = (&a - &reference).abs().max();
        let e2 = (&b - &reference).abs().max();
        let e3 = (&c - &reference).abs().max();
        assert!((e1 / e2).log2() >= 3.5 && (e2 / e3).log2() >= 3.5, "seed {seed}: {e1} {e2} {e3}");
    }
}

#[test]
fn larger_terminal_weight_gives_larger_solution() {
    let make = |l: f64| {
        LQProblem::builder(1, 1, 1.0, bounds())
            .a(mat1(0.3))
            .b_tilde(mat1(1.0))
            .c(mat1(0.4))
            .d(mat1(0.2))
            .q(mat1(0.5))
            .r(mat1(1.0))
            .l(mat1(l))
            .x0(vec1(1.0))
            .build()
            .unwrap()
    };
    let lo = solve_riccati(&make(0.5), &sbar(), 500).unwrap();
    let hi = solve_riccati(&make(2.0), &sbar(), 500).unwrap();
    for (a, b) in hi.p.iter().zip(&lo.p) {
        assert!(a[(0, 0)] >= b[(0, 0)]);
    }
}

#[test]
fn standard_instances_stay_positive_definite() {
    for seed in 0..20 {
        let p = corpus::random_instance(seed, 3, 2);
        let ric = solve_riccati(&p, &sbar(), 500).unwrap();
        for pm in &ric.p {
            assert!(min_sym_eig(pm) > 0.0, "seed {seed}");
            assert_eq!(pm, &pm.transpose());
        }
        let law = optimal_feedback(&p, &ric).unwrap();
        assert_eq!(law.gain[0].shape(), (2, 3));
    }
}

#[test]
fn piecewise_scenario_changes_the_solution_only_through_d() {
    let s = VolatilityScenario::uniform(1.0, vec![0.5, 1.0]).unwrap();
    let p = closed_form(0.0, 0.0);
    let a = solve_riccati(&p, &s, 200).unwrap();
    let b = solve_riccati(&p, &sbar(), 200).unwrap();
    assert!(a.times.contains(&0.5));
    // C = D = 0: P does not see γ
    assert!((a.p[0][(0, 0)] - b.p[0][(0, 0)]).abs() < 1e-12);
}

use glq_core::corpus;
use glq_core::problem::{mat1, vec1};
use glq_core::riccati::{optimal_feedback, solve_riccati};
use glq_core::rng::NormalStream;
use glq_core::sim::{cost_under_scenario, k_residual, simulate, verify_value_process, SimConfig};
use nalgebra::DMatrix;

use glq_core::{AmbiguityBounds, FeedbackControl, FeedbackLaw, LQProblem, VolatilityScenario};

fn bounds() -> AmbiguityBounds {
    AmbiguityBounds::new(1.0, 0.5).unwrap()
}

fn cfg(paths: usize, steps: usize) -> SimConfig {
    SimConfig::default_for(1.0).with_paths(paths).with_steps(1.0, steps)
}

fn pure_noise(x0: f64) -> LQProblem {
    LQProblem::builder(1, 1, 1.0, bounds())
        .sigma(vec1(1.0))
        .r(mat1(1.0))
        .l(mat1(1.0))
        .x0(vec1(x0))
        .build()
        .unwrap()
}

fn zero(p: &LQProblem) -> FeedbackControl {
    FeedbackControl::Feedback(FeedbackLaw::zero(p))
}

/// Sample variance of `x(1) − x₀` and its approximate standard error.
fn terminal_variance(p: &LQProblem, s: &VolatilityScenario, c: &SimConfig) -> (f64, f64) {
    let b = simulate(p, &zero(p), s, c).unwrap();
    let n = b.x.len();
    let d: Vec<f64> = b.x.iter().map(|xs| xs.last().unwrap()[0] - p.x0[0]).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var, var * (2.0 / (n - 1) as f64).sqrt())
}

#[test]
fn brownian_variance() {
    let p = pure_noise(0.4);
    let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
    let (v, se) = terminal_variance(&p, &s, &cfg(4000, 20));
    assert!((v - 1.0).abs() <= 3.0 * se, "{v} ± {se}");
}

#[test]
fn time_changed_variance() {
    let p = pure_noise(0.0);
    let s = VolatilityScenario::uniform(1.0, vec![0.5, 1.0]).unwrap();
    let (v, se) = terminal_variance(&p, &s, &cfg(4000, 20));
    assert!((v - 0.75).abs() <= 3.0 * se, "{v} ± {se}");
}

/// Exact transition of `dx = (a x + b) dt + s dB` over one step with `γ`.
fn exact_step(x: f64, a: f64, b: f64, s: f64, gamma: f64, h: f64, z: f64) -> f64 {
    let e = (a * h).exp();
    let var = s * s * gamma * ((2.0 * a * h).exp() - 1.0) / (2.0 * a);
    e * x + b * (e - 1.0) / a + var.sqrt() * z
}

#[test]
fn euler_agrees_with_exact_linear_sampler() {
    let (a, b, s) = (-0.7, 0.3, 0.5);
    let p = LQProblem::builder(1, 1, 1.0, bounds())
        .a(mat1(a))
        .b(vec1(b))
        .sigma(vec1(s))
        .x0(vec1(1.0))
        .build()
        .unwrap();
    let scen = VolatilityScenario::uniform(1.0, vec![1.0, 0.5, 0.8, 1.0]).unwrap();
    let mean_gap = |steps: usize| {
        let c = cfg(200, steps);
        let bundle = simulate(&p, &zero(&p), &scen, &c).unwrap();
        let h = 1.0 / steps as f64;
        let mut total = 0.0;
        for (i, xs) in bundle.x.iter().enumerate() {
            let mut stream = NormalStream::new(c.seed, i as u64);
            let mut x = 1.0;
            for k in 0..steps {
                let gamma = scen.gamma_at((k as f64 + 0.5) * h);
                x = exact_step(x, a, b, s, gamma, h, stream.normal(k as u64));
            }
            total += (xs[steps][0] - x).abs();
        }
        total / bundle.x.len() as f64
    };
    let (g1, g2) = (mean_gap(200), mean_gap(400));
    assert!(g1 < 5e-3, "{g1}");
    assert!(g2 / g1 < 0.65, "{g1} {g2}");
}

fn closed_form(sigma: f64) -> LQProblem {
    LQProblem::builder(1, 1, 1.0, bounds())
        .b_tilde(mat1(1.0))
        .r(mat1(1.0))
        .l(mat1(1.0))
        .b(vec1(0.2))
        .sigma(vec1(sigma))
        .x0(vec1(1.0))
        .build()
        .unwrap()
}

#[test]
fn optimal_cost_matches_value_function() {
    let p = closed_form(0.5);
    let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
    let ric = solve_riccati(&p, &s, 2000).unwrap();
    let ctrl = FeedbackControl::Feedback(optimal_feedback(&p, &ric).unwrap());
    let steps = 500;
    let (m, se) = cost_under_scenario(&p, &ctrl, &s, &cfg(4000, steps)).unwrap();
    let v = ric.initial_value(&p.x0);
    assert!((m - v).abs() <= 3.0 * se + 5.0 / steps as f64, "{m} ± {se} vs {v}");
}

#[test]
fn deterministic_problems_cost_nothing_from_rest() {
    let p = LQProblem::builder(2, 1, 1.0, bounds())
        .a(DMatrix::identity(2, 2))
        .q(DMatrix::identity(2, 2))
        .r(mat1(1.0))
        .l(DMatrix::identity(2, 2))
        .build()
        .unwrap();
    let s = VolatilityScenario::constant(1.0, 0.7).unwrap();
    let (m, se) = cost_under_scenario(&p, &zero(&p), &s, &cfg(8, 50)).unwrap();
    assert_eq!((m, se), (0.0, 0.0));
}

#[test]
fn reruns_are_bit_identical_and_seeds_matter() {
    let p = corpus::random_instance(3, 2, 1);
    let low = p.bounds.sigma_low_sq();
    let s = VolatilityScenario::uniform(1.0, vec![low, 1.0, low, 1.0]).unwrap();
    let ric = solve_riccati(&p, &VolatilityScenario::constant(1.0, 1.0).unwrap(), 200).unwrap();
    let ctrl = FeedbackControl::Feedback(optimal_feedback(&p, &ric).unwrap());
    let a = simulate(&p, &ctrl, &s, &cfg(32, 40)).unwrap();
    let b = simulate(&p, &ctrl, &s, &cfg(32, 40)).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.cost, b.cost);
    let c = simulate(&p, &ctrl, &s, &cfg(32, 40).with_seed(7)).unwrap();
    assert_ne!(a.cost, c.cost);
}

#[test]
fn stderr_shrinks_like_inverse_root_paths() {
    let p = closed_form(0.5);
    let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
    let ctrl = zero(&p);
    let (_, s1) = cost_under_scenario(&p, &ctrl, &s, &cfg(2000, 20)).unwrap();
    let (_, s2) = cost_under_scenario(&p, &ctrl, &s, &cfg(4000, 20)).unwrap();
    let ratio = s2 / s1;
    let want = 0.5f64.sqrt();
    assert!((ratio / want - 1.0).abs() <= 0.2, "{ratio}");
}

#[test]
fn antithetic_pairs_reduce_error_on_linear_cost() {
    let p = closed_form(0.5);
    let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
    let anti = SimConfig {
        antithetic: true,
        ..cfg(2000, 20)
    };
    let (_, plain) = cost_under_scenario(&p, &zero(&p), &s, &cfg(2000, 20)).unwrap();
    let (_, paired) = cost_under_scenario(&p, &zero(&p), &s, &anti).unwrap();
    assert!(paired < plain);
}

#[test]
fn k_residual_sign_and_reference_zero() {
    for seed in 0..4 {
        let p = corpus::random_instance(seed, 2, 1);
        let sbar = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let ric = solve_riccati(&p, &sbar, 500).unwrap();
        let ctrl = FeedbackControl::Feedback(optimal_feedback(&p, &ric).unwrap());
        let c = cfg(200, 100);
        let at_ref = k_residual(&p, &ctrl, &sbar, &ric, &c).unwrap();
        assert!(at_ref.per_path.iter().all(|&v| v == 0.0));
        assert_eq!(at_ref.mean, 0.0);
        let low = p.bounds.sigma_low_sq();
        for values in [vec![low; 4], vec![low, 1.0, low, 1.0], vec![1.0, 1.0, 1.0, low]] {
            let s = VolatilityScenario::uniform(1.0, values).unwrap();
            let k = k_residual(&p, &ctrl, &s, &ric, &c).unwrap();
            assert!(k.max_over_paths <= 1e-12);
            assert!(k.mean < -3.0 * k.stderr, "{} ± {}", k.mean, k.stderr);
        }
    }
}

#[test]
fn k_residual_vanishes_without_noise() {
    let p = LQProblem::builder(1, 1, 1.0, bounds())
        .a(mat1(0.5))
        .b_tilde(mat1(1.0))
        .q(mat1(1.0))
        .r(mat1(1.0))
        .l(mat1(1.0))
        .x0(vec1(1.0))
        .build()
        .unwrap();
    let ric = solve_riccati(&p, &VolatilityScenario::constant(1.0, 1.0).unwrap(), 200).unwrap();
    let ctrl = FeedbackControl::Feedback(optimal_feedback(&p, &ric).unwrap());
    let s = VolatilityScenario::uniform(1.0, vec![0.5, 1.0]).unwrap();
    let k = k_residual(&p, &ctrl, &s, &ric, &cfg(16, 50)).unwrap();
    assert!(k.per_path.iter().all(|&v| v == 0.0));
}

#[test]
fn value_process_identity() {
    // zero problem: both sides vanish identically
    let p = LQProblem::builder(1, 1, 1.0, bounds()).r(mat1(1.0)).build().unwrap();
    let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
    let ric = solve_riccati(&p, &s, 100).unwrap();
    let r = verify_value_process(&p, &ric, &s, &cfg(8, 100)).unwrap();
    assert_eq!(r.max_deviation, 0.0);

    // strong order ½: halving dt shrinks the deviation by about √2
    let p = closed_form(0.5);
    let ric = solve_riccati(&p, &s, 4000).unwrap();
    let dev = |steps: usize| {
        let r = verify_value_process(&p, &ric, &s, &cfg(400, steps)).unwrap();
        assert!(r.terminal_deviation <= 1e-14);
        r.max_deviation
    };
    let (d1, d2, d3) = (dev(250), dev(500), dev(1000));
    for ratio in [d1 / d2, d2 / d3] {
        assert!((1.15..=1.75).contains(&ratio), "{d1} {d2} {d3}");
    }
}

#[test]
fn value_process_under_other_scenarios_uses_k_compensator() {
    let p = corpus::random_instance(11, 2, 1);
    let ric = solve_riccati(&p, &VolatilityScenario::constant(1.0, 1.0).unwrap(), 2000).unwrap();
    let s = VolatilityScenario::uniform(1.0, vec![p.bounds.sigma_low_sq(), 1.0]).unwrap();
    let r = verify_value_process(&p, &ric, &s, &cfg(200, 1000)).unwrap();
    assert!(r.max_deviation < 0.1, "{}", r.max_deviation);
    assert!(r.terminal_deviation <= 1e-14);
    assert!(r.mean_cost.is_finite() && r.mean_value.is_finite());
}

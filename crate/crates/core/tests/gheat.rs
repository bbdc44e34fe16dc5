use std::f64::consts::PI;

use glq_core::corpus;
use glq_core::gheat::{self, compose_conditional, g_expectation, solve_g_heat, GridSpec, Payoff, DEFAULT_TOL};
use glq_core::rng::NormalStream;
use glq_core::{AmbiguityBounds, VolatilityScenario};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bounds(sbar: f64, slow: f64) -> AmbiguityBounds {
    AmbiguityBounds::new(sbar, slow).unwrap()
}

fn ghat(phi: &Payoff, t: f64, b: &AmbiguityBounds) -> f64 {
    g_expectation(phi, t, b, &GridSpec::default().grid_for(b, t)).unwrap()
}

#[test]
fn variance_identities() {
    let b = bounds(2.0, 1.0);
    assert!((ghat(&Payoff::square(), 1.0, &b) - 2.0).abs() < 1e-2);
    assert!((ghat(&Payoff::neg_square(), 1.0, &b) + 1.0).abs() < 1e-2);
    assert!((ghat(&Payoff::square(), 0.5, &b) - 1.0).abs() < 1e-2);
}

#[test]
fn convex_payoffs_match_the_upper_gaussian() {
    let b = bounds(1.0, 0.5);
    // E|N(0,1)| and E[max(N(0,1), 0)]
    assert!((ghat(&Payoff::abs(), 1.0, &b) - (2.0 / PI).sqrt()).abs() < DEFAULT_TOL);
    assert!((ghat(&Payoff::call(0.0), 1.0, &b) - 1.0 / (2.0 * PI).sqrt()).abs() < DEFAULT_TOL);
}

#[test]
fn concave_payoff_matches_the_lower_gaussian() {
    let b = bounds(1.0, 0.25);
    // −E|N(0, 0.25)| = −0.5·√(2/π)
    let v = ghat(&Payoff::abs().scaled(-1.0), 1.0, &b);
    assert!((v + 0.5 * (2.0 / PI).sqrt()).abs() < DEFAULT_TOL, "{v}");
}

#[test]
fn constants_pass_through_exactly() {
    let b = bounds(1.5, 0.3);
    for c in [-3.25, 0.0, 1.0, 7.5] {
        assert_eq!(ghat(&Payoff::constant(c), 0.7, &b), c);
    }
}

#[test]
fn comparison_principle_on_every_layer() {
    let b = bounds(1.0, 0.5);
    let grid = GridSpec {
        n_space: 201,
        ..GridSpec::default()
    }
    .grid_for(&b, 1.0);
    let lo = Payoff::put(0.2);
    let hi = lo.max(&Payoff::new("sin", Some(1.0), f64::sin));
    let a = solve_g_heat(&hi, 1.0, &b, &grid).unwrap();
    let c = solve_g_heat(&lo, 1.0, &b, &grid).unwrap();
    for (la, lc) in a.u.iter().zip(&c.u) {
        for (x, y) in la.iter().zip(lc) {
            assert!(x >= y);
        }
    }
}

#[test]
fn composition_oracles() {
    let b = bounds(1.0, 0.5);
    let spec = GridSpec {
        n_space: 201,
        ..GridSpec::default()
    };
    let budget = gheat::DEFAULT_COMPOSE_BUDGET;
    // inner: x₁² + σ̄²(t₂ − t₁); outer: σ̄² t₁ + σ̄²(t₂ − t₁)
    let v = compose_conditional(|x1, x2| x1 * x1 + x2 * x2, 0.5, 1.0, &b, &spec, budget).unwrap();
    assert!((v - 1.0).abs() < 1e-2, "{v}");
    let v = compose_conditional(|x1, _| x1, 0.5, 1.0, &b, &spec, budget).unwrap();
    assert!(v.abs() < 1e-12);
    let v = compose_conditional(|_, _| 2.5, 0.5, 1.0, &b, &spec, budget).unwrap();
    assert_eq!(v, 2.5);
}

#[test]
fn refinement_ratio_on_convex_payoff() {
    let b = bounds(1.0, 0.5);
    let exact = (2.0 / PI).sqrt();
    let errs: Vec<f64> = [101usize, 201, 401]
        .iter()
        .map(|&n| {
            let g = GridSpec {
                n_space: n,
                ..GridSpec::default()
            }
            .grid_for(&b, 1.0);
            (g_expectation(&Payoff::abs(), 1.0, &b, &g).unwrap() - exact).abs()
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] / w[0] <= 0.6, "errors {errs:?}");
    }
}

/// Monte Carlo `E_P[φ(B_T)]` for a deterministic scenario: `B_T` is normal
/// with variance `⟨B⟩(T)`.
fn mc_expectation(phi: &Payoff, s: &VolatilityScenario, n: usize) -> (f64, f64) {
    let sd = s.quadratic_variation(s.horizon()).sqrt();
    let mut stream = NormalStream::new(99, 0);
    let xs: Vec<f64> = (0..n as u64).map(|k| phi.eval(sd * stream.normal(k))).collect();
    glq_core::sim::mean_stderr(&xs, false)
}

#[test]
fn dominates_every_tested_scenario() {
    let b = bounds(1.0, 0.4);
    let scenarios = [
        VolatilityScenario::constant(1.0, 1.0).unwrap(),
        VolatilityScenario::constant(1.0, 0.4).unwrap(),
        VolatilityScenario::uniform(1.0, vec![0.4, 1.0, 0.7, 0.4]).unwrap(),
        VolatilityScenario::uniform(1.0, vec![1.0, 0.4]).unwrap(),
    ];
    for (phi, psi) in corpus::payoff_pairs(5, 4) {
        for payoff in [phi, psi] {
            let g = ghat(&payoff, 1.0, &b);
            for s in &scenarios {
                let (m, se) = mc_expectation(&payoff, s, 20_000);
                assert!(g >= m - 3.0 * se, "{}: {g} < {m} - 3*{se}", payoff.name());
            }
        }
    }
}

#[test]
fn attained_at_the_extreme_scenarios() {
    let b = bounds(1.0, 0.4);
    let convex = Payoff::call(0.3);
    let concave = Payoff::call(0.3).scaled(-1.0);
    let (m, se) = mc_expectation(&convex, &VolatilityScenario::constant(1.0, 1.0).unwrap(), 200_000);
    assert!((ghat(&convex, 1.0, &b) - m).abs() <= 3.0 * se + DEFAULT_TOL);
    let (m, se) = mc_expectation(&concave, &VolatilityScenario::constant(1.0, 0.4).unwrap(), 200_000);
    assert!((ghat(&concave, 1.0, &b) - m).abs() <= 3.0 * se + DEFAULT_TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sublinear_expectation_properties(seed in 0u64..10_000, lambda in 0.0f64..3.0, c in -2.0f64..2.0) {
        let b = bounds(1.0, 0.5);
        let grid = GridSpec { n_space: 201, ..GridSpec::default() }.grid_for(&b, 1.0);
        let e = |p: &Payoff| g_expectation(p, 1.0, &b, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = corpus::random_payoff(&mut rng);
        let psi = corpus::random_payoff(&mut rng);
        let (ep, eq) = (e(&phi), e(&psi));
        prop_assert!(e(&phi.max(&psi)) >= ep - DEFAULT_TOL);
        prop_assert!(e(&phi.sum(&psi)) <= ep + eq + DEFAULT_TOL);
        prop_assert!((e(&phi.scaled(lambda)) - lambda * ep).abs() <= DEFAULT_TOL);
        prop_assert_eq!(e(&Payoff::constant(c)), c);
        // translation by a constant
        prop_assert!((e(&phi.sum(&Payoff::constant(c))) - (ep + c)).abs() <= 1e-9);
    }
}

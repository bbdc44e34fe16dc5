//! Seeded random LQ instances and perturbed feedback laws for property tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gheat::Payoff;
use crate::problem::{AmbiguityBounds, FeedbackLaw, LQProblem};

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-half_width..half_width))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(lo..hi))
}

/// Random instance with constant coefficients on `[0, 1]`, `σ̄² = 1`,
/// `R ≥ I`, `Q − S R⁻¹ Sᵀ ≥ 0.1 I`, `L ≥ 0.5 I` and nonzero noise.
pub fn random_instance(seed: u64, n: usize, m: usize) -> LQProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = rng.gen_range(0.2..0.8);
    let bounds = AmbiguityBounds::new(1.0, low).expect("valid bounds");
    let a = uniform_matrix(&mut rng, n, n, 0.5);
    let b_tilde = uniform_matrix(&mut rng, n, m, 1.0);
    let c = uniform_matrix(&mut rng, n, n, 0.3);
    let d = uniform_matrix(&mut rng, n, m, 0.3);
    let b = uniform_vector(&mut rng, n, -0.2, 0.2);
    let sigma = uniform_vector(&mut rng, n, 0.2, 0.6);
    let g = uniform_matrix(&mut rng, m, m, 1.0);
    let r = DMatrix::identity(m, m) + &g * g.transpose() * 0.5;
    let s = uniform_matrix(&mut rng, m, n, 0.3);
    let h = uniform_matrix(&mut rng, n, n, 1.0);
    let r_inv = r.clone().try_inverse().expect("R is positive definite");
    let q = s.transpose() * r_inv * &s + &h * h.transpose() * 0.5 + DMatrix::identity(n, n) * 0.1;
    let k = uniform_matrix(&mut rng, n, n, 1.0);
    let l = &k * k.transpose() * 0.5 + DMatrix::identity(n, n) * 0.5;
    let x0 = uniform_vector(&mut rng, n, -1.0, 1.0);
    LQProblem::builder(n, m, 1.0, bounds)
        .a(a)
        .b_tilde(b_tilde)
        .c(c)
        .d(d)
        .b(b)
        .sigma(sigma)
        .q(symmetric(q))
        .s(s)
        .r(symmetric(r))
        .l(symmetric(l))
        .x0(x0)
        .build()
        .expect("consistent dimensions")
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `count` perturbations of `base` with relative sizes spread over
/// `[0.05, 0.5]`, cycling through gain-only, offset-only and both.
///
/// Sizes are relative to the largest gain (offset) norm along `base`, floored
/// at 0.1 so that a zero offset still gets perturbed.
pub fn perturbed_laws(base: &FeedbackLaw, count: usize, seed: u64) -> Vec<FeedbackLaw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = base.gain[0].shape();
    let gain_scale = base.gain.iter().map(|g| g.norm()).fold(0.1, f64::max);
    let offset_scale = base.offset.iter().map(|o| o.norm()).fold(0.1, f64::max);
    (0..count)
        .map(|i| {
            let eps = if count > 1 {
                0.05 + 0.45 * i as f64 / (count - 1) as f64
            } else {
                0.05
            };
            let mut e = uniform_matrix(&mut rng, m, n, 1.0);
            e /= e.norm().max(1e-12);
            let mut f = uniform_vector(&mut rng, m, -1.0, 1.0);
            f /= f.norm().max(1e-12);
            let (dg, dk) = match i % 3 {
                0 => (e * (eps * gain_scale), DVector::zeros(m)),
                1 => (DMatrix::zeros(m, n), f * (eps * offset_scale)),
                _ => (e * (eps * gain_scale), f * (eps * offset_scale)),
            };
            base.map(|g| g + &dg, |o| o + &dk)
        })
        .collect()
}

/// One random bounded-Lipschitz payoff: a scaled call, put, kink, ramp,
/// sine or tanh with random location.
pub fn random_payoff(rng: &mut ChaCha8Rng) -> Payoff {
    let c: f64 = rng.gen_range(-1.0..1.0);
    let scale: f64 = rng.gen_range(-2.0..2.0);
    let base = match rng.gen_range(0..6) {
        0 => Payoff::call(c),
        1 => Payoff::put(c),
        2 => Payoff::new(format!("abs(x-{c})"), Some(1.0), move |x| (x - c).abs()),
        3 => Payoff::new(format!("clamp(x-{c})"), Some(1.0), move |x| (x - c).clamp(-1.0, 1.0)),
        4 => Payoff::new(format!("sin(2x+{c})"), Some(2.0), move |x| (2.0 * x + c).sin()),
        _ => Payoff::new(format!("tanh(3(x-{c}))"), Some(3.0), move |x| (3.0 * (x - c)).tanh()),
    };
    base.scaled(scale)
}

/// `count` seeded payoff pairs.
pub fn payoff_pairs(seed: u64, count: usize) -> Vec<(Payoff, Payoff)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (random_payoff(&mut rng), random_payoff(&mut rng)))
        .collect()
}

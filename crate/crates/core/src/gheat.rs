//! Sublinear expectations of functions of a scalar G-Brownian motion.
//!
//! `Ê[φ(x + B_t)] = u(t, x)` where `u` solves the G-heat equation
//! `∂_t u = G(∂²_xx u)`, `u(0, ·) = φ`, with
//! `G(a) = ½(σ̄² a⁺ − σ̲² a⁻)`. The equation is solved with the explicit
//! monotone scheme
//!
//! ```text
//! u[k+1][i] = u[k][i] + dt · G((u[k][i+1] − 2 u[k][i] + u[k][i−1]) / dx²)
//! ```
//!
//! which is monotone whenever `dt σ̄² / dx² ≤ ½`. The two boundary nodes use a
//! linearly extrapolated ghost node, so their second difference is zero and
//! they keep the payoff value.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::AmbiguityBounds;

/// Largest admissible `dt σ̄² / dx²`.
pub const CFL_LIMIT: f64 = 0.5;

/// Default tolerance on expectation values for the default grid.
pub const DEFAULT_TOL: f64 = 1e-3;

/// `G(a) = ½(σ̄² a⁺ − σ̲² a⁻)`.
#[inline]
pub fn g_scalar(a: f64, bounds: &AmbiguityBounds) -> f64 {
    if a >= 0.0 {
        0.5 * bounds.sigma_bar_sq() * a
    } else {
        0.5 * bounds.sigma_low_sq() * a
    }
}

/// A terminal payoff: a callable plus a declared Lipschitz bound.
#[derive(Clone)]
pub struct Payoff {
    name: String,
    lipschitz: Option<f64>,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl Payoff {
    pub fn new(
        name: impl Into<String>,
        lipschitz: Option<f64>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            lipschitz,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared Lipschitz bound on the computational domain, if any.
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant({c})"), Some(0.0), move |_| c)
    }

    pub fn linear(slope: f64) -> Self {
        Self::new(format!("linear({slope})"), Some(slope.abs()), move |x| slope * x)
    }

    /// `x²`; Lipschitz only on the bounded computational domain.
    pub fn square() -> Self {
        Self::new("square", None, |x| x * x)
    }

    pub fn neg_square() -> Self {
        Self::new("neg_square", None, |x| -x * x)
    }

    pub fn abs() -> Self {
        Self::new("abs", Some(1.0), f64::abs)
    }

    /// `max(x − K, 0)`.
    pub fn call(strike: f64) -> Self {
        Self::new(format!("call({strike})"), Some(1.0), move |x| (x - strike).max(0.0))
    }

    /// `max(K − x, 0)`.
    pub fn put(strike: f64) -> Self {
        Self::new(format!("put({strike})"), Some(1.0), move |x| (strike - x).max(0.0))
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let f = self.f.clone();
        Self::new(
            format!("{lambda}*{}", self.name),
            self.lipschitz.map(|l| l * lambda.abs()),
            move |x| lambda * f(x),
        )
    }

    /// Pointwise maximum.
    pub fn max(&self, other: &Payoff) -> Self {
        let (f, g) = (self.f.clone(), other.f.clone());
        let lip = match (self.lipschitz, other.lipschitz) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        Self::new(format!("max({},{})", self.name, other.name), lip, move |x| f(x).max(g(x)))
    }

    pub fn sum(&self, other: &Payoff) -> Self {
        let (f, g) = (self.f.clone(), other.f.clone());
        let lip = match (self.lipschitz, other.lipschitz) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        Self::new(format!("{}+{}", self.name, other.name), lip, move |x| f(x) + g(x))
    }
}

/// How to build a grid for a given horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Half-width of the domain in units of `σ̄ √t`.
    pub width_sd: f64,
    /// Number of space nodes (odd keeps `x = 0` on the grid).
    pub n_space: usize,
    /// Target `dt σ̄² / dx²`, at most [`CFL_LIMIT`].
    pub cfl: f64,
    /// Upper bound on the number of time layers kept in a solution.
    pub max_stored_layers: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width_sd: 6.0,
            n_space: 801,
            cfl: CFL_LIMIT,
            max_stored_layers: 101,
        }
    }
}

impl GridSpec {
    pub fn grid_for(&self, bounds: &AmbiguityBounds, horizon: f64) -> GHeatGrid {
        let scale = (bounds.sigma_bar_sq() * horizon.max(0.0)).sqrt();
        // a zero horizon still needs a nondegenerate domain
        let half = self.width_sd * if scale > 0.0 { scale } else { 1.0 };
        let n_space = self.n_space.max(3);
        let dx = 2.0 * half / (n_space - 1) as f64;
        let n_time = if horizon > 0.0 {
            let dt_max = self.cfl.min(CFL_LIMIT) * dx * dx / bounds.sigma_bar_sq();
            (horizon / dt_max).ceil() as usize
        } else {
            0
        };
        GHeatGrid {
            x_min: -half,
            x_max: half,
            n_space,
            n_time,
            max_stored_layers: self.max_stored_layers,
        }
    }
}

/// Uniform space–time grid for one G-heat solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GHeatGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_space: usize,
    pub n_time: usize,
    pub max_stored_layers: usize,
}

impl GHeatGrid {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_space - 1) as f64
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        if self.n_time == 0 {
            0.0
        } else {
            horizon / self.n_time as f64
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n_space {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_space).map(|i| self.x(i)).collect()
    }

    pub fn cfl_ratio(&self, horizon: f64, bounds: &AmbiguityBounds) -> f64 {
        let dx = self.dx();
        self.dt(horizon) * bounds.sigma_bar_sq() / (dx * dx)
    }

    fn check(&self, horizon: f64, bounds: &AmbiguityBounds) -> Result<()> {
        if !(self.x_min < 0.0 && 0.0 < self.x_max) {
            return Err(Error::InvalidInput(format!(
                "grid must straddle 0, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if self.n_space < 3 {
            return Err(Error::InvalidInput("grid needs at least 3 space nodes".into()));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid horizon {horizon}")));
        }
        if horizon > 0.0 && self.n_time == 0 {
            return Err(Error::InvalidInput("positive horizon needs n_time >= 1".into()));
        }
        let ratio = self.cfl_ratio(horizon, bounds);
        // relative slack absorbs rounding in dt = horizon / n_time
        if ratio > CFL_LIMIT * (1.0 + 1e-12) {
            return Err(Error::Cfl { ratio });
        }
        Ok(())
    }
}

/// Solution layers of a G-heat problem.
#[derive(Debug, Clone)]
pub struct GHeatSolution {
    pub grid: GHeatGrid,
    pub horizon: f64,
    pub terminal_payoff: String,
    /// Times of the stored layers; always includes `0` and `horizon`.
    pub times: Vec<f64>,
    /// `u[k][i]` is the solution at `times[k]`, `x_i`.
    pub u: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl GHeatSolution {
    pub fn final_layer(&self) -> &[f64] {
        self.u.last().expect("at least one layer")
    }

    /// Final-layer value at `x`, linearly interpolated.
    pub fn value_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, self.final_layer(), x)
    }
}

fn interpolate(grid: &GHeatGrid, layer: &[f64], x: f64) -> f64 {
    let s = (x - grid.x_min) / grid.dx();
    if s <= 0.0 {
        return layer[0];
    }
    let i = s.floor() as usize;
    if i + 1 >= grid.n_space {
        return layer[grid.n_space - 1];
    }
    let w = s - i as f64;
    if w == 0.0 {
        layer[i]
    } else {
        (1.0 - w) * layer[i] + w * layer[i + 1]
    }
}

/// Solves the G-heat equation with payoff `phi` up to `horizon`.
pub fn solve_g_heat(
    phi: &Payoff,
    horizon: f64,
    bounds: &AmbiguityBounds,
    grid: &GHeatGrid,
) -> Result<GHeatSolution> {
    grid.check(horizon, bounds)?;
    let initial: Vec<f64> = grid.nodes().into_iter().map(|x| phi.eval(x)).collect();
    Ok(march(initial, phi.name().to_string(), horizon, bounds, grid, true))
}

/// `Ê[φ(B_T)]`: the solution at `x = 0` after time `horizon`.
pub fn g_expectation(
    phi: &Payoff,
    horizon: f64,
    bounds: &AmbiguityBounds,
    grid: &GHeatGrid,
) -> Result<f64> {
    grid.check(horizon, bounds)?;
    let initial: Vec<f64> = grid.nodes().into_iter().map(|x| phi.eval(x)).collect();
    let sol = march(initial, phi.name().to_string(), horizon, bounds, grid, false);
    Ok(sol.value_at(0.0))
}

/// Explicit time marching. With `keep_layers == false` only the first and
/// last layers are kept.
fn march(
    initial: Vec<f64>,
    payoff: String,
    horizon: f64,
    bounds: &AmbiguityBounds,
    grid: &GHeatGrid,
    keep_layers: bool,
) -> GHeatSolution {
    let n = grid.n_space;
    let dt = grid.dt(horizon);
    let dx = grid.dx();
    let lam_up = 0.5 * bounds.sigma_bar_sq() * dt / (dx * dx);
    let lam_down = 0.5 * bounds.sigma_low_sq() * dt / (dx * dx);

    let stride = if keep_layers && grid.max_stored_layers >= 2 {
        grid.n_time.div_ceil(grid.max_stored_layers - 1).max(1)
    } else {
        usize::MAX
    };

    let mut times = vec![0.0];
    let mut layers = vec![initial.clone()];
    let mut cur = initial;
    let mut next = cur.clone();
    for k in 0..grid.n_time {
        for i in 1..n - 1 {
            let d2 = cur[i + 1] - 2.0 * cur[i] + cur[i - 1];
            let lam = if d2 >= 0.0 { lam_up } else { lam_down };
            next[i] = cur[i] + lam * d2;
        }
        // boundary nodes: zero second difference, value unchanged
        next[0] = cur[0];
        next[n - 1] = cur[n - 1];
        std::mem::swap(&mut cur, &mut next);
        let step = k + 1;
        if step == grid.n_time || step % stride == 0 {
            times.push(if step == grid.n_time { horizon } else { step as f64 * dt });
            layers.push(cur.clone());
        }
    }
    let mut warnings = Vec::new();
    let first = &layers[0];
    for i in [1, n - 2] {
        let growth = (cur[i] - first[i]).abs();
        if growth > DEFAULT_TOL * (1.0 + first[i].abs()) {
            let msg = format!(
                "domain may be too small: solution moved by {growth:.3e} next to the boundary x={:.4}",
                grid.x(i)
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    GHeatSolution {
        grid: *grid,
        horizon,
        terminal_payoff: payoff,
        times,
        u: layers,
        warnings,
    }
}

/// Default cap on inner-sweep work for [`compose_conditional`], in grid-node updates.
pub const DEFAULT_COMPOSE_BUDGET: u64 = 2_000_000_000;

/// Two-step conditional composition `Ê[φ₂(B(t₁), B(t₂) − B(t₁))]`.
///
/// The inner problem `φ₁(x₁) = Ê[φ₂(x₁, B(t₂) − B(t₁))]` is solved for every
/// node of the outer grid; the outer problem then takes `φ₁` over `t₁`.
pub fn compose_conditional<F>(
    phi2: F,
    t1: f64,
    t2: f64,
    bounds: &AmbiguityBounds,
    spec: &GridSpec,
    max_nodes: u64,
) -> Result<f64>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    if !(0.0 <= t1 && t1 < t2) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= t1 < t2, got t1={t1}, t2={t2}"
        )));
    }
    let outer = spec.grid_for(bounds, t1);
    let inner = spec.grid_for(bounds, t2 - t1);
    outer.check(t1, bounds)?;
    inner.check(t2 - t1, bounds)?;

    let inner_work = (outer.n_space as u128) * (inner.n_space as u128) * (inner.n_time.max(1) as u128);
    if inner_work > max_nodes as u128 {
        return Err(Error::BudgetExceeded {
            what: "inner G-heat sweep".into(),
            size: inner_work,
            limit: max_nodes as u128,
        });
    }

    let inner_nodes = inner.nodes();
    let xs = outer.nodes();
    let phi1: Vec<f64> = xs
        .par_iter()
        .map(|&x1| {
            let init: Vec<f64> = inner_nodes.iter().map(|&x2| phi2(x1, x2)).collect();
            march(init, String::new(), t2 - t1, bounds, &inner, false).value_at(0.0)
        })
        .collect();
    let sol = march(phi1, "composed".into(), t1, bounds, &outer, false);
    Ok(sol.value_at(0.0))
}

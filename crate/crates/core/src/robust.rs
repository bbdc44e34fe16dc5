//! Robust cost `sup_γ E_γ[cost]` over a finite family of piecewise-constant
//! scenarios, and the closed-form volatility example.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::{uniform_breakpoints, AmbiguityBounds, FeedbackControl, LQProblem, VolatilityScenario};
use crate::sim::{SimConfig, SimPlan};

/// Largest family enumerated without an explicit budget.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1 << 20;

/// Bang-bang families up to this size are enumerated under [`SearchMethod::Auto`].
pub const AUTO_EXHAUSTIVE_MAX_N: usize = 16;

/// Relative tolerance under which two objective values count as tied.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Levels {
    /// `{σ̲², σ̄²}`.
    BangBang,
    /// `k ≥ 2` equally spaced levels from `σ̲²` to `σ̄²`.
    Ladder(usize),
}

/// Scenarios constant on each of `n_intervals` equal cells of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioFamily {
    pub n_intervals: usize,
    pub levels: Levels,
}

impl ScenarioFamily {
    pub fn bang_bang(n_intervals: usize) -> Self {
        Self {
            n_intervals,
            levels: Levels::BangBang,
        }
    }

    pub fn ladder(n_intervals: usize, k: usize) -> Self {
        Self {
            n_intervals,
            levels: Levels::Ladder(k),
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_intervals == 0 {
            return Err(Error::InvalidInput("scenario family needs at least one interval".into()));
        }
        if let Levels::Ladder(k) = self.levels {
            if k < 2 {
                return Err(Error::InvalidInput(format!("ladder needs at least 2 levels, got {k}")));
            }
        }
        Ok(())
    }

    /// Admissible values, ascending.
    pub fn level_values(&self, bounds: &AmbiguityBounds) -> Vec<f64> {
        let (lo, hi) = (bounds.sigma_low_sq(), bounds.sigma_bar_sq());
        match self.levels {
            Levels::BangBang => vec![lo, hi],
            Levels::Ladder(k) => (0..k)
                .map(|i| {
                    if i + 1 == k {
                        hi
                    } else {
                        lo + (hi - lo) * i as f64 / (k - 1) as f64
                    }
                })
                .collect(),
        }
    }

    pub fn n_levels(&self) -> usize {
        match self.levels {
            Levels::BangBang => 2,
            Levels::Ladder(k) => k,
        }
    }

    /// Number of members, `None` on overflow.
    pub fn size(&self) -> Option<u128> {
        (self.n_levels() as u128).checked_pow(self.n_intervals.try_into().ok()?)
    }

    /// Member with the given per-interval level indices.
    pub fn member(&self, bounds: &AmbiguityBounds, horizon: f64, idx: &[usize]) -> Result<VolatilityScenario> {
        let levels = self.level_values(bounds);
        let values = idx.iter().map(|&i| levels[i]).collect();
        VolatilityScenario::new(uniform_breakpoints(horizon, self.n_intervals), values)
    }

    /// Level indices of the `i`-th member in lexicographic order.
    fn digits(&self, mut i: u128) -> Vec<usize> {
        let k = self.n_levels() as u128;
        let mut out = vec![0; self.n_intervals];
        for d in out.iter_mut().rev() {
            *d = (i % k) as usize;
            i /= k;
        }
        out
    }

    pub fn describe(&self) -> String {
        match self.levels {
            Levels::BangBang => format!("bang-bang, N={}", self.n_intervals),
            Levels::Ladder(k) => format!("ladder({k}), N={}", self.n_intervals),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMethod {
    /// Exhaustive for bang-bang families with `N ≤ 16`, coordinate ascent otherwise.
    Auto,
    Exhaustive,
    /// Sweeps from the all-`σ̄²` start plus `restarts` random starts.
    CoordinateAscent { restarts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub sim: SimConfig,
    pub method: SearchMethod,
    pub max_enumeration: u128,
}

impl RobustConfig {
    pub fn new(sim: SimConfig) -> Self {
        Self {
            sim,
            method: SearchMethod::Auto,
            max_enumeration: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    pub fn with_method(mut self, method: SearchMethod) -> Self {
        self.method = method;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEntry {
    pub hash: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodUsed {
    Exhaustive,
    CoordinateAscent,
}

impl MethodUsed {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodUsed::Exhaustive => "exhaustive",
            MethodUsed::CoordinateAscent => "coordinate-ascent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RobustResult {
    pub value: f64,
    pub stderr: f64,
    pub argmax_scenario: VolatilityScenario,
    /// Evaluated scenarios in lexicographic order of their level indices.
    pub table: Vec<ScenarioEntry>,
    pub method: MethodUsed,
}

/// Strictly better than `best`, beyond the tie tolerance.
fn beats(candidate: f64, best: f64) -> bool {
    candidate > best + TIE_TOL * best.abs().max(1.0)
}

/// Worst-case expected cost of `ctrl` over `family`, with common random
/// numbers across scenarios.
pub fn robust_cost(
    p: &LQProblem,
    ctrl: &FeedbackControl,
    family: &ScenarioFamily,
    cfg: &RobustConfig,
) -> Result<RobustResult> {
    family.check()?;
    let probe = family.member(&p.bounds, p.horizon, &vec![0; family.n_intervals])?;
    let plan = SimPlan::new(p, ctrl, &cfg.sim, Some(&probe))?;
    let eval = |idx: &[usize]| -> Result<(f64, f64)> {
        plan.cost(&family.member(&p.bounds, p.horizon, idx)?)
    };
    search(p, family, cfg, eval)
}

/// Search driver shared by the Monte Carlo and closed-form objectives.
/// `eval` returns `(mean, stderr)` for a vector of level indices.
pub fn search<F>(p: &LQProblem, family: &ScenarioFamily, cfg: &RobustConfig, eval: F) -> Result<RobustResult>
where
    F: Fn(&[usize]) -> Result<(f64, f64)> + Sync,
{
    family.check()?;
    let exhaustive = match cfg.method {
        SearchMethod::Exhaustive => true,
        SearchMethod::CoordinateAscent { .. } => false,
        SearchMethod::Auto => {
            family.levels == Levels::BangBang && family.n_intervals <= AUTO_EXHAUSTIVE_MAX_N
        }
    };
    let evaluated: BTreeMap<Vec<usize>, (f64, f64)> = if exhaustive {
        let size = family.size().filter(|&s| s <= cfg.max_enumeration).ok_or_else(|| {
            Error::BudgetExceeded {
                what: format!("enumeration of {}", family.describe()),
                size: family.size().unwrap_or(u128::MAX),
                limit: cfg.max_enumeration,
            }
        })?;
        let results: Vec<Result<(Vec<usize>, (f64, f64))>> = (0..size as u64)
            .into_par_iter()
            .map(|i| {
                let idx = family.digits(i as u128);
                let r = eval(&idx)?;
                Ok((idx, r))
            })
            .collect();
        results.into_iter().collect::<Result<_>>()?
    } else {
        let restarts = match cfg.method {
            SearchMethod::CoordinateAscent { restarts } => restarts,
            _ => 4,
        };
        coordinate_ascent(family, cfg.sim.seed, restarts, &eval)?
    };

    // BTreeMap order is lexicographic in the level indices, so keeping the
    // first maximum implements the tie rule.
    let mut best: Option<(&Vec<usize>, (f64, f64))> = None;
    for (idx, &r) in &evaluated {
        if best.is_none_or(|(_, b)| beats(r.0, b.0)) {
            best = Some((idx, r));
        }
    }
    let (best_idx, (value, stderr)) = best.expect("family is nonempty");
    let argmax_scenario = family.member(&p.bounds, p.horizon, best_idx)?;
    let levels = family.level_values(&p.bounds);
    let table = evaluated
        .iter()
        .map(|(idx, &(mean, se))| {
            let s = family.member(&p.bounds, p.horizon, idx)?;
            Ok(ScenarioEntry {
                hash: s.content_hash(),
                values: idx.iter().map(|&i| levels[i]).collect(),
                mean,
                stderr: se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustResult {
        value,
        stderr,
        argmax_scenario,
        table,
        method: if exhaustive {
            MethodUsed::Exhaustive
        } else {
            MethodUsed::CoordinateAscent
        },
    })
}

fn coordinate_ascent<F>(
    family: &ScenarioFamily,
    seed: u64,
    restarts: usize,
    eval: &F,
) -> Result<BTreeMap<Vec<usize>, (f64, f64)>>
where
    F: Fn(&[usize]) -> Result<(f64, f64)> + Sync,
{
    let k = family.n_levels();
    let n = family.n_intervals;
    let mut cache: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a5ce);
    let mut starts = vec![vec![k - 1; n]];
    for _ in 0..restarts {
        starts.push((0..n).map(|_| rng.gen_range(0..k)).collect());
    }
    for start in starts {
        let mut cur = start;
        let mut cur_val = lookup(&mut cache, &cur, eval)?.0;
        loop {
            let mut improved = false;
            for i in 0..n {
                let candidates: Vec<Vec<usize>> = (0..k)
                    .filter(|&lvl| lvl != cur[i])
                    .map(|lvl| {
                        let mut c = cur.clone();
                        c[i] = lvl;
                        c
                    })
                    .collect();
                let missing: Vec<&Vec<usize>> =
                    candidates.iter().filter(|c| !cache.contains_key(*c)).collect();
                let fresh: Vec<Result<(f64, f64)>> = missing.par_iter().map(|c| eval(c)).collect();
                for (c, r) in missing.into_iter().zip(fresh) {
                    cache.insert(c.clone(), r?);
                }
                for c in candidates {
                    let v = cache[&c].0;
                    if beats(v, cur_val) || (!beats(cur_val, v) && c < cur) {
                        cur = c;
                        cur_val = v;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    Ok(cache)
}

fn lookup<F>(cache: &mut BTreeMap<Vec<usize>, (f64, f64)>, idx: &[usize], eval: &F) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Result<(f64, f64)>,
{
    if let Some(&r) = cache.get(idx) {
        return Ok(r);
    }
    let r = eval(idx)?;
    cache.insert(idx.to_vec(), r);
    Ok(r)
}

/// `½∫₀ᵀ (a t − ⟨B⟩(t)) γ(t) dt` with `⟨B⟩(t) = ∫₀ᵗ γ`, exact on each interval.
///
/// This is the example's cost at the optimal control `u ≡ 0`; meaningful for `a > σ̄²`.
pub fn example_objective(a: f64, scenario: &VolatilityScenario) -> f64 {
    let bp = scenario.breakpoints();
    let mut qv = 0.0;
    let mut total = 0.0;
    for (w, &g) in bp.windows(2).zip(scenario.values()) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        total += g * (a * (t1 * t1 - t0 * t0) / 2.0 - qv * h - g * h * h / 2.0);
        qv += g * h;
    }
    0.5 * total
}

/// `σ̄² T / (a + σ̄² − σ̲²)`.
pub fn example_t_star(a: f64, bounds: &AmbiguityBounds, horizon: f64) -> f64 {
    bounds.sigma_bar_sq() * horizon / (a + bounds.sigma_bar_sq() - bounds.sigma_low_sq())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleFamilyKind {
    /// `σ̲²` on the first `j` cells, `σ̄²` on the rest, `j = 0..=N`.
    SingleSwitch,
    /// All `2^N` bang-bang scenarios.
    FullBangBang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleFamily {
    pub n_intervals: usize,
    pub kind: ExampleFamilyKind,
}

/// Exhaustive enumeration of the full family is used up to this `N`.
pub const EXAMPLE_EXHAUSTIVE_MAX_N: usize = 20;

#[derive(Debug, Clone)]
pub struct ExampleResult {
    pub t_star_numeric: f64,
    pub value: f64,
    pub argmax: VolatilityScenario,
    pub t_star_formula: f64,
    pub n_evaluated: u64,
}

/// Maximizes [`example_objective`] over a bang-bang family and locates the
/// down-up switch of the maximizer.
pub fn example_worst_case(
    a: f64,
    bounds: &AmbiguityBounds,
    horizon: f64,
    family: &ExampleFamily,
) -> Result<ExampleResult> {
    if a <= bounds.sigma_bar_sq() {
        return Err(Error::InvalidInput(format!(
            "a={a} must exceed sigma_bar_sq={}",
            bounds.sigma_bar_sq()
        )));
    }
    let n = family.n_intervals;
    if n == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidInput("need N >= 1 and T > 0".into()));
    }
    let fam = ScenarioFamily::bang_bang(n);
    let objective = |idx: &[usize]| -> Result<f64> { Ok(example_objective(a, &fam.member(bounds, horizon, idx)?)) };
    let switch = |j: usize| -> Vec<usize> { (0..n).map(|i| usize::from(i >= j)).collect() };

    // Candidates in lexicographic order of level indices.
    let exhaustive = family.kind == ExampleFamilyKind::FullBangBang && n <= EXAMPLE_EXHAUSTIVE_MAX_N;
    let (best_idx, value, n_evaluated) = if exhaustive {
        let size = 1u64 << n;
        let values: Vec<Result<f64>> = (0..size)
            .into_par_iter()
            .map(|i| objective(&fam.digits(i as u128)))
            .collect();
        let mut best: Option<(u64, f64)> = None;
        for (i, v) in values.into_iter().enumerate() {
            let v = v?;
            if best.is_none_or(|(_, b)| beats(v, b)) {
                best = Some((i as u64, v));
            }
        }
        let (i, v) = best.expect("nonempty");
        (fam.digits(i as u128), v, size)
    } else {
        // For a fixed number of σ̄² cells ⟨B⟩(T) is fixed and the objective
        // grows with ∫ t γ, so the σ̄² cells go last; the full family thus
        // reduces to the single-switch members.
        let mut best: Option<(Vec<usize>, f64)> = None;
        for j in (0..=n).rev() {
            let idx = switch(j);
            let v = objective(&idx)?;
            if best.as_ref().is_none_or(|(_, b)| beats(v, *b)) {
                best = Some((idx, v));
            }
        }
        let (idx, v) = best.expect("nonempty");
        (idx, v, n as u64 + 1)
    };

    let j = best_idx.iter().take_while(|&&d| d == 0).count();
    if best_idx != switch(j) {
        return Err(Error::Shape(format!(
            "worst case is not a single down-up switch: levels {best_idx:?}"
        )));
    }
    Ok(ExampleResult {
        t_star_numeric: j as f64 * horizon / n as f64,
        value,
        argmax: fam.member(bounds, horizon, &best_idx)?,
        t_star_formula: example_t_star(a, bounds, horizon),
        n_evaluated,
    })
}

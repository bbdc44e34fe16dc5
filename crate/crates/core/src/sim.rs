//! Monte Carlo simulation of the controlled linear state equation under one
//! deterministic volatility scenario.
//!
//! Euler–Maruyama on a uniform grid, `dB = √(γ dt) ξ` with `ξ` drawn from
//! [`NormalStream`] keyed by `(seed, path, step)`. Time integrals use the
//! trapezoid rule per step (coefficients of that step at both ends),
//! stochastic integrals the left point.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::{FeedbackControl, FeedbackLaw, LQProblem, VolatilityScenario};
use crate::riccati::{self, RiccatiSolution};
use crate::rng::{NormalStream, DEFAULT_SEED};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    /// Pair path `2j+1` with the negated noise of path `2j`.
    pub antithetic: bool,
}

impl SimConfig {
    /// 1000 paths, `dt = T/1000`, default seed.
    pub fn default_for(horizon: f64) -> Self {
        Self {
            n_paths: 1000,
            dt_sim: horizon / 1000.0,
            seed: DEFAULT_SEED,
            antithetic: false,
        }
    }

    pub fn with_paths(mut self, n: usize) -> Self {
        self.n_paths = n;
        self
    }

    pub fn with_steps(mut self, horizon: f64, n_steps: usize) -> Self {
        self.dt_sim = horizon / n_steps as f64;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Uniform simulation grid; every scenario breakpoint must be a node.
pub fn sim_grid(horizon: f64, dt_sim: f64, scenario: Option<&VolatilityScenario>) -> Result<Vec<f64>> {
    if !(dt_sim > 0.0 && dt_sim <= horizon) {
        return Err(Error::InvalidInput(format!("dt_sim={dt_sim} must lie in (0, T]")));
    }
    let ratio = horizon / dt_sim;
    let n = ratio.round() as usize;
    if (ratio - n as f64).abs() > 1e-6 {
        return Err(Error::Alignment(format!(
            "dt_sim={dt_sim} does not divide the horizon {horizon}"
        )));
    }
    if let Some(s) = scenario {
        if (s.horizon() - horizon).abs() > 1e-9 * horizon {
            return Err(Error::Alignment(format!(
                "scenario horizon {} differs from problem horizon {horizon}",
                s.horizon()
            )));
        }
        for &bp in s.breakpoints() {
            let r = bp / dt_sim;
            if (r - r.round()).abs() > 1e-6 {
                return Err(Error::Alignment(format!(
                    "dt_sim={dt_sim} does not divide the scenario interval ending at {bp}"
                )));
            }
        }
    }
    Ok(crate::problem::uniform_breakpoints(horizon, n))
}

/// Row-major copy of a matrix.
fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out += scale * M v` for a row-major `rows × cols` matrix.
#[inline]
fn gemv_add(out: &mut [f64], m: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * v[j];
        }
        *o += scale * acc;
    }
}

/// `xᵀ M y` for row-major `M`.
#[inline]
fn quad(x: &[f64], m: &[f64], y: &[f64]) -> f64 {
    let cols = y.len();
    let mut acc = 0.0;
    for (i, xi) in x.iter().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        let mut r = 0.0;
        for j in 0..cols {
            r += row[j] * y[j];
        }
        acc += xi * r;
    }
    acc
}

#[derive(Debug, Clone)]
pub(crate) struct StepCoef {
    pub h: f64,
    pub a: Vec<f64>,
    pub bt: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LawTable {
    gain: Vec<Vec<f64>>,
    offset: Vec<Vec<f64>>,
}

impl LawTable {
    fn new(law: &FeedbackLaw, times: &[f64]) -> Self {
        Self {
            gain: times.iter().map(|&t| flat(&law.gain_at(t))).collect(),
            offset: times.iter().map(|&t| law.offset_at(t).as_slice().to_vec()).collect(),
        }
    }

    /// `u = −K x − k`.
    #[inline]
    fn eval(&self, k: usize, x: &[f64], u: &mut [f64]) {
        for (ui, oi) in u.iter_mut().zip(&self.offset[k]) {
            *ui = -oi;
        }
        gemv_add(u, &self.gain[k], x, -1.0);
    }
}

#[derive(Debug, Clone)]
enum ControlTable {
    Feedback(LawTable),
    OpenLoop(Vec<Vec<Vec<f64>>>),
    Perturbed {
        base: LawTable,
        direction: LawTable,
        rho: f64,
    },
}

/// Scenario-independent part of a simulation: grid, coefficients, control
/// tables and the standard normal draws. Reused across scenarios, which gives
/// common random numbers for free.
#[derive(Debug, Clone)]
pub struct SimPlan {
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) times: Vec<f64>,
    pub(crate) steps: Vec<StepCoef>,
    l: Vec<f64>,
    x0: Vec<f64>,
    control: ControlTable,
    /// `xi[key][k]`; with antithetic pairs one row serves two paths.
    xi: Vec<Vec<f64>>,
    pub(crate) cfg: SimConfig,
    sigma_bar_sq: f64,
}

impl SimPlan {
    /// `breakpoints` (scenario or family breakpoints) must fall on the grid.
    pub fn new(
        p: &LQProblem,
        ctrl: &FeedbackControl,
        cfg: &SimConfig,
        alignment: Option<&VolatilityScenario>,
    ) -> Result<Self> {
        if cfg.n_paths == 0 {
            return Err(Error::InvalidInput("n_paths must be >= 1".into()));
        }
        let times = sim_grid(p.horizon, cfg.dt_sim, alignment)?;
        let steps: Vec<StepCoef> = times
            .windows(2)
            .map(|w| {
                let c = p.coefficients_at(0.5 * (w[0] + w[1]));
                StepCoef {
                    h: w[1] - w[0],
                    a: flat(&c.a),
                    bt: flat(&c.b_tilde),
                    c: flat(&c.c),
                    d: flat(&c.d),
                    b: c.b.as_slice().to_vec(),
                    sigma: c.sigma.as_slice().to_vec(),
                    q: flat(&c.q),
                    s: flat(&c.s),
                    r: flat(&c.r),
                }
            })
            .collect();
        let control = match ctrl {
            FeedbackControl::Feedback(law) => {
                check_law(p, law)?;
                ControlTable::Feedback(LawTable::new(law, &times))
            }
            FeedbackControl::Perturbed { base, direction, rho } => {
                check_law(p, base)?;
                check_law(p, direction)?;
                ControlTable::Perturbed {
                    base: LawTable::new(base, &times),
                    direction: LawTable::new(direction, &times),
                    rho: *rho,
                }
            }
            FeedbackControl::OpenLoop { times: ut, paths } => {
                if ut.len() != times.len()
                    || ut.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-9 * p.horizon)
                {
                    return Err(Error::Alignment(
                        "open-loop control times must equal the simulation grid".into(),
                    ));
                }
                if paths.len() != cfg.n_paths {
                    return Err(Error::DimensionMismatch {
                        name: "open-loop control".into(),
                        expected: format!("{} paths", cfg.n_paths),
                        found: format!("{} paths", paths.len()),
                    });
                }
                let mut table = Vec::with_capacity(paths.len());
                for path in paths {
                    if path.len() != times.len() || path.iter().any(|u| u.len() != p.m) {
                        return Err(Error::DimensionMismatch {
                            name: "open-loop control".into(),
                            expected: format!("{} nodes of length {}", times.len(), p.m),
                            found: format!("{} nodes", path.len()),
                        });
                    }
                    table.push(path.iter().map(|u| u.as_slice().to_vec()).collect());
                }
                ControlTable::OpenLoop(table)
            }
        };
        let n_steps = steps.len();
        let keys = if cfg.antithetic {
            cfg.n_paths.div_ceil(2)
        } else {
            cfg.n_paths
        };
        let xi: Vec<Vec<f64>> = (0..keys)
            .into_par_iter()
            .map(|key| NormalStream::new(cfg.seed, key as u64).normals(n_steps))
            .collect();
        Ok(Self {
            n: p.n,
            m: p.m,
            times,
            steps,
            l: flat(&p.l),
            x0: p.x0.as_slice().to_vec(),
            control,
            xi,
            cfg: *cfg,
            sigma_bar_sq: p.bounds.sigma_bar_sq(),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Per-step `γ` of a scenario on this grid.
    pub fn gammas(&self, scenario: &VolatilityScenario) -> Result<Vec<f64>> {
        for &bp in scenario.breakpoints() {
            if !self.times.iter().any(|t| (t - bp).abs() <= 1e-9 * self.horizon()) {
                return Err(Error::Alignment(format!(
                    "scenario breakpoint {bp} is not on the simulation grid"
                )));
            }
        }
        Ok(self
            .times
            .windows(2)
            .map(|w| scenario.gamma_at(0.5 * (w[0] + w[1])))
            .collect())
    }

    fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    #[inline]
    pub(crate) fn xi(&self, path: usize, k: usize) -> f64 {
        if self.cfg.antithetic {
            let z = self.xi[path / 2][k];
            if path % 2 == 1 {
                -z
            } else {
                z
            }
        } else {
            self.xi[path][k]
        }
    }

    /// Runs one path; returns its cost and reports every node to `obs`.
    pub(crate) fn run_path(&self, gammas: &[f64], path: usize, obs: &mut dyn PathObserver) -> f64 {
        let (n, m) = (self.n, self.m);
        let n_steps = self.steps.len();
        let mut x = self.x0.clone();
        let mut xn = vec![0.0; n];
        let mut u = vec![0.0; m];
        let mut diff = vec![0.0; n];
        let perturbed = matches!(self.control, ControlTable::Perturbed { .. });
        let mut xb = if perturbed { self.x0.clone() } else { Vec::new() };
        let mut ub = vec![0.0; if perturbed { m } else { 0 }];
        let mut v = vec![0.0; if perturbed { m } else { 0 }];
        let mut xbn = vec![0.0; if perturbed { n } else { 0 }];

        let mut running = 0.0;
        for k in 0..=n_steps {
            match &self.control {
                ControlTable::Feedback(law) => law.eval(k, &x, &mut u),
                ControlTable::OpenLoop(paths) => u.copy_from_slice(&paths[path][k]),
                ControlTable::Perturbed { base, direction, rho } => {
                    base.eval(k, &xb, &mut ub);
                    direction.eval(k, &xb, &mut v);
                    for i in 0..m {
                        u[i] = ub[i] + rho * (v[i] - ub[i]);
                    }
                }
            }
            obs.node(k, &x, &u);
            if k > 0 {
                running += 0.5 * self.steps[k - 1].h * stage_cost(&self.steps[k - 1], &x, &u);
            }
            if k == n_steps {
                break;
            }
            let st = &self.steps[k];
            running += 0.5 * st.h * stage_cost(st, &x, &u);

            let db = (gammas[k] * st.h).sqrt() * self.xi(path, k);
            obs.step(k, db);
            euler(st, &x, &u, db, &mut xn, &mut diff);
            std::mem::swap(&mut x, &mut xn);
            if perturbed {
                euler(st, &xb, &ub, db, &mut xbn, &mut diff);
                std::mem::swap(&mut xb, &mut xbn);
            }
        }
        0.5 * (running + quad(&x, &self.l, &x))
    }

    /// Cost of every path under `scenario`, in path order.
    pub fn path_costs(&self, scenario: &VolatilityScenario) -> Result<Vec<f64>> {
        let gammas = self.gammas(scenario)?;
        Ok((0..self.cfg.n_paths)
            .into_par_iter()
            .map(|i| self.run_path(&gammas, i, &mut NoObserver))
            .collect())
    }

    pub fn cost(&self, scenario: &VolatilityScenario) -> Result<(f64, f64)> {
        let costs = self.path_costs(scenario)?;
        Ok(mean_stderr(&costs, self.cfg.antithetic))
    }

    /// Full path records under `scenario`.
    pub fn simulate(&self, scenario: &VolatilityScenario) -> Result<PathBundle> {
        let gammas = self.gammas(scenario)?;
        let records: Vec<(PathRecorder, f64)> = (0..self.cfg.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rec = PathRecorder::new(self.times.len());
                let c = self.run_path(&gammas, i, &mut rec);
                (rec, c)
            })
            .collect();
        let mut bundle = PathBundle {
            times: self.times.clone(),
            gammas,
            x: Vec::with_capacity(records.len()),
            u: Vec::with_capacity(records.len()),
            db: Vec::with_capacity(records.len()),
            cost: Vec::with_capacity(records.len()),
            mean: 0.0,
            stderr: 0.0,
            antithetic: self.cfg.antithetic,
        };
        for (rec, c) in records {
            bundle.x.push(rec.x);
            bundle.u.push(rec.u);
            bundle.db.push(rec.db);
            bundle.cost.push(c);
        }
        let (mean, se) = mean_stderr(&bundle.cost, self.cfg.antithetic);
        bundle.mean = mean;
        bundle.stderr = se;
        Ok(bundle)
    }

    pub(crate) fn sigma_bar_sq(&self) -> f64 {
        self.sigma_bar_sq
    }
}

fn check_law(p: &LQProblem, law: &FeedbackLaw) -> Result<()> {
    if law.gain.iter().any(|k| k.nrows() != p.m || k.ncols() != p.n)
        || law.offset.iter().any(|k| k.len() != p.m)
    {
        return Err(Error::DimensionMismatch {
            name: "feedback law".into(),
            expected: format!("gain {}x{}, offset {}", p.m, p.n, p.m),
            found: "other shapes".into(),
        });
    }
    Ok(())
}

/// `xᵀQx + 2uᵀSx + uᵀRu`.
#[inline]
pub(crate) fn stage_cost(st: &StepCoef, x: &[f64], u: &[f64]) -> f64 {
    quad(x, &st.q, x) + 2.0 * quad(u, &st.s, x) + quad(u, &st.r, u)
}

/// One Euler–Maruyama step; `diff` is scratch of length `n`.
#[inline]
pub(crate) fn euler(st: &StepCoef, x: &[f64], u: &[f64], db: f64, out: &mut [f64], diff: &mut [f64]) {
    out.copy_from_slice(x);
    for (o, bi) in out.iter_mut().zip(&st.b) {
        *o += st.h * bi;
    }
    gemv_add(out, &st.a, x, st.h);
    gemv_add(out, &st.bt, u, st.h);
    if db != 0.0 {
        diff.copy_from_slice(&st.sigma);
        gemv_add(diff, &st.c, x, 1.0);
        gemv_add(diff, &st.d, u, 1.0);
        for (o, di) in out.iter_mut().zip(diff.iter()) {
            *o += di * db;
        }
    }
}

pub(crate) trait PathObserver {
    fn node(&mut self, _k: usize, _x: &[f64], _u: &[f64]) {}
    fn step(&mut self, _k: usize, _db: f64) {}
}

struct NoObserver;
impl PathObserver for NoObserver {}

struct PathRecorder {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    db: Vec<f64>,
}

impl PathRecorder {
    fn new(nodes: usize) -> Self {
        Self {
            x: Vec::with_capacity(nodes),
            u: Vec::with_capacity(nodes),
            db: Vec::with_capacity(nodes.saturating_sub(1)),
        }
    }
}

impl PathObserver for PathRecorder {
    fn node(&mut self, _k: usize, x: &[f64], u: &[f64]) {
        self.x.push(DVector::from_column_slice(x));
        self.u.push(DVector::from_column_slice(u));
    }
    fn step(&mut self, _k: usize, db: f64) {
        self.db.push(db);
    }
}

/// Sample paths of one simulation.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub times: Vec<f64>,
    /// `γ` on each step.
    pub gammas: Vec<f64>,
    pub x: Vec<Vec<DVector<f64>>>,
    pub u: Vec<Vec<DVector<f64>>>,
    /// Brownian increments, one per step.
    pub db: Vec<Vec<f64>>,
    pub cost: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub antithetic: bool,
}

/// Sample mean and its standard error. Antithetic pairs are averaged first.
pub fn mean_stderr(values: &[f64], antithetic: bool) -> (f64, f64) {
    let pooled: Vec<f64>;
    let xs: &[f64] = if antithetic && values.len() >= 2 {
        pooled = values
            .chunks(2)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        &pooled
    } else {
        values
    };
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn simulate(
    p: &LQProblem,
    ctrl: &FeedbackControl,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<PathBundle> {
    scenario.check_bounds(&p.bounds)?;
    SimPlan::new(p, ctrl, cfg, Some(scenario))?.simulate(scenario)
}

/// Monte Carlo estimate of the cost under the scenario's measure: `(mean, stderr)`.
pub fn cost_under_scenario(
    p: &LQProblem,
    ctrl: &FeedbackControl,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<(f64, f64)> {
    scenario.check_bounds(&p.bounds)?;
    SimPlan::new(p, ctrl, cfg, Some(scenario))?.cost(scenario)
}

#[derive(Debug, Clone)]
pub struct KResidual {
    pub mean: f64,
    pub stderr: f64,
    /// Largest per-path value (all values are `≤ 0` up to rounding).
    pub max_over_paths: f64,
    pub per_path: Vec<f64>,
}

/// `K̄(T) = ½ ∫ ⟨P v, v⟩ (γ(s) − σ̄²) ds` with `v = C x̄ + D ū + σ`, per path.
///
/// `ric` should be solved with `γ ≡ σ̄²`.
pub fn k_residual(
    p: &LQProblem,
    ctrl: &FeedbackControl,
    scenario: &VolatilityScenario,
    ric: &RiccatiSolution,
    cfg: &SimConfig,
) -> Result<KResidual> {
    scenario.check_bounds(&p.bounds)?;
    let plan = SimPlan::new(p, ctrl, cfg, Some(scenario))?;
    let gammas = plan.gammas(scenario)?;
    let p_nodes: Vec<Vec<f64>> = plan.times.iter().map(|&t| flat(&ric.p_at(t))).collect();
    let sbar = plan.sigma_bar_sq();
    let per_path: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut obs = KbarObserver {
                plan: &plan,
                p_nodes: &p_nodes,
                gammas: &gammas,
                sbar,
                prev: 0.0,
                acc: 0.0,
                v: vec![0.0; plan.n],
            };
            plan.run_path(&gammas, i, &mut obs);
            0.5 * obs.acc
        })
        .collect();
    let (mean, stderr) = mean_stderr(&per_path, cfg.antithetic);
    let max_over_paths = per_path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(KResidual {
        mean,
        stderr,
        max_over_paths,
        per_path,
    })
}

/// `⟨P v, v⟩` with `v = C x + D u + σ` for the step's coefficients.
#[inline]
fn pv_v(st: &StepCoef, p: &[f64], x: &[f64], u: &[f64], v: &mut [f64]) -> f64 {
    v.copy_from_slice(&st.sigma);
    gemv_add(v, &st.c, x, 1.0);
    gemv_add(v, &st.d, u, 1.0);
    quad(v, p, v)
}

struct KbarObserver<'a> {
    plan: &'a SimPlan,
    p_nodes: &'a [Vec<f64>],
    gammas: &'a [f64],
    sbar: f64,
    /// integrand at the left end of the current step
    prev: f64,
    acc: f64,
    v: Vec<f64>,
}

impl PathObserver for KbarObserver<'_> {
    fn node(&mut self, k: usize, x: &[f64], u: &[f64]) {
        let steps = &self.plan.steps;
        if k > 0 {
            let st = &steps[k - 1];
            let right = pv_v(st, &self.p_nodes[k], x, u, &mut self.v);
            let weight = self.gammas[k - 1] - self.sbar;
            if weight != 0.0 {
                self.acc += weight * st.h * 0.5 * (self.prev + right);
            }
        }
        if k < steps.len() {
            self.prev = pv_v(&steps[k], &self.p_nodes[k], x, u, &mut self.v);
        }
    }
}

/// Discrepancy between the two sides of the value-process identity
/// `Ỹ(t) = ½⟨L x̄(T), x̄(T)⟩ + ½∫ₜᵀ f ds − ∫ₜᵀ Z̃ dB − (K̃(T) − K̃(t))`.
#[derive(Debug, Clone)]
pub struct ValueProcessCheck {
    /// Largest `|LHS − RHS|` over paths and grid times.
    pub max_deviation: f64,
    /// Largest discrepancy at `t = T` (zero by construction).
    pub terminal_deviation: f64,
    /// Mean over paths of `Ỹ(0)` and of the realized cost.
    pub mean_value: f64,
    pub mean_cost: f64,
}

/// Checks the value-process identity along paths driven by the optimal
/// feedback of `ric`. `K̃` is measured against the `γ` that `ric` was solved
/// with (`σ̄²` for the reference construction).
pub fn verify_value_process(
    p: &LQProblem,
    ric: &RiccatiSolution,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<ValueProcessCheck> {
    scenario.check_bounds(&p.bounds)?;
    let law = riccati::optimal_feedback(p, ric)?;
    let ctrl = FeedbackControl::Feedback(law);
    let bundle = simulate(p, &ctrl, scenario, cfg)?;
    let plan = SimPlan::new(p, &ctrl, cfg, Some(scenario))?;
    let times = &bundle.times;
    let p_nodes: Vec<Vec<f64>> = times.iter().map(|&t| flat(&ric.p_at(t))).collect();
    let phi_nodes: Vec<DVector<f64>> = times.iter().map(|&t| ric.phi_at(t)).collect();
    let l_nodes: Vec<f64> = times.iter().map(|&t| ric.l_at(t)).collect();
    let ref_gamma: Vec<f64> = times
        .windows(2)
        .map(|w| ric.gamma_used.gamma_at(0.5 * (w[0] + w[1])))
        .collect();
    let n = p.n;
    let n_steps = times.len() - 1;

    let per_path: Vec<(f64, f64, f64, f64)> = (0..bundle.x.len())
        .into_par_iter()
        .map(|i| {
            let xs = &bundle.x[i];
            let us = &bundle.u[i];
            let mut v = vec![0.0; n];
            let lhs = |k: usize| {
                let x = xs[k].as_slice();
                0.5 * quad(x, &p_nodes[k], x) + phi_nodes[k].dot(&xs[k]) + l_nodes[k]
            };
            let x_t = xs[n_steps].as_slice();
            let mut rhs = 0.5 * quad(x_t, &plan_l(&plan), x_t);
            let terminal = (lhs(n_steps) - rhs).abs();
            let mut worst = terminal;
            for k in (0..n_steps).rev() {
                let st = &plan.steps[k];
                let (x0, u0) = (xs[k].as_slice(), us[k].as_slice());
                let (x1, u1) = (xs[k + 1].as_slice(), us[k + 1].as_slice());
                let run = 0.5 * st.h * (stage_cost(st, x0, u0) + stage_cost(st, x1, u1));
                let g0 = pv_v(st, &p_nodes[k], x0, u0, &mut v);
                let z = {
                    // Z̃ = ⟨P x + φ, v⟩ at the left point
                    let mut px = phi_nodes[k].as_slice().to_vec();
                    gemv_add(&mut px, &p_nodes[k], x0, 1.0);
                    px.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
                };
                let g1 = pv_v(st, &p_nodes[k + 1], x1, u1, &mut v);
                let dk = 0.5 * (bundle.gammas[k] - ref_gamma[k]) * st.h * 0.5 * (g0 + g1);
                rhs += 0.5 * run - z * bundle.db[i][k] - dk;
                worst = worst.max((lhs(k) - rhs).abs());
            }
            (worst, terminal, lhs(0), bundle.cost[i])
        })
        .collect();

    let count = per_path.len() as f64;
    Ok(ValueProcessCheck {
        max_deviation: per_path.iter().map(|r| r.0).fold(0.0, f64::max),
        terminal_deviation: per_path.iter().map(|r| r.1).fold(0.0, f64::max),
        mean_value: per_path.iter().map(|r| r.2).sum::<f64>() / count,
        mean_cost: per_path.iter().map(|r| r.3).sum::<f64>() / count,
    })
}

fn plan_l(plan: &SimPlan) -> Vec<f64> {
    plan.l.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{mat1, vec1, AmbiguityBounds};

    fn bounds() -> AmbiguityBounds {
        AmbiguityBounds::new(1.0, 0.5).unwrap()
    }

    fn noise_only(sigma: f64) -> LQProblem {
        LQProblem::builder(1, 1, 1.0, bounds())
            .sigma(vec1(sigma))
            .r(mat1(1.0))
            .l(mat1(1.0))
            .x0(vec1(0.3))
            .build()
            .unwrap()
    }

    fn zero_ctrl(p: &LQProblem) -> FeedbackControl {
        FeedbackControl::Feedback(FeedbackLaw::zero(p))
    }

    #[test]
    fn zero_dynamics_keep_the_initial_state() {
        let p = noise_only(0.0);
        let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(8).with_steps(1.0, 50);
        let b = simulate(&p, &zero_ctrl(&p), &s, &cfg).unwrap();
        assert!(b.x.iter().flatten().all(|x| x[0] == 0.3));
    }

    #[test]
    fn grid_must_contain_scenario_breakpoints() {
        let s = VolatilityScenario::new(vec![0.0, 0.33, 1.0], vec![0.5, 1.0]).unwrap();
        assert!(matches!(sim_grid(1.0, 0.1, Some(&s)), Err(Error::Alignment(_))));
        assert!(matches!(sim_grid(1.0, 0.3, None), Err(Error::Alignment(_))));
        let s = VolatilityScenario::new(vec![0.0, 0.3, 1.0], vec![0.5, 1.0]).unwrap();
        assert_eq!(sim_grid(1.0, 0.1, Some(&s)).unwrap().len(), 11);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let p = noise_only(1.0);
        let s = VolatilityScenario::uniform(1.0, vec![0.5, 1.0]).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(64).with_steps(1.0, 20);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&p, &zero_ctrl(&p), &s, &cfg).unwrap());
        let b = four.install(|| simulate(&p, &zero_ctrl(&p), &s, &cfg).unwrap());
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.x, b.x);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    }

    #[test]
    fn antithetic_pairs_mirror_noise() {
        let p = noise_only(1.0);
        let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let cfg = SimConfig {
            antithetic: true,
            ..SimConfig::default_for(1.0).with_paths(4).with_steps(1.0, 10)
        };
        let b = simulate(&p, &zero_ctrl(&p), &s, &cfg).unwrap();
        for k in 0..10 {
            assert_eq!(b.db[0][k], -b.db[1][k]);
            assert_eq!(b.db[2][k], -b.db[3][k]);
        }
    }

    #[test]
    fn zero_cost_weights_give_zero_cost() {
        let p = LQProblem::builder(1, 1, 1.0, bounds())
            .a(mat1(0.5))
            .sigma(vec1(1.0))
            .x0(vec1(1.0))
            .build()
            .unwrap();
        let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(16).with_steps(1.0, 20);
        let (m, se) = cost_under_scenario(&p, &zero_ctrl(&p), &s, &cfg).unwrap();
        assert_eq!((m, se), (0.0, 0.0));
    }

    #[test]
    fn open_loop_control_must_match_grid() {
        let p = noise_only(0.0);
        let s = VolatilityScenario::constant(1.0, 1.0).unwrap();
        let cfg = SimConfig::default_for(1.0).with_paths(2).with_steps(1.0, 4);
        let ctrl = FeedbackControl::OpenLoop {
            times: vec![0.0, 0.5, 1.0],
            paths: vec![vec![vec1(0.0); 3]; 2],
        };
        assert!(matches!(simulate(&p, &ctrl, &s, &cfg), Err(Error::Alignment(_))));
    }

    #[test]
    fn mean_stderr_basics() {
        let (m, se) = mean_stderr(&[1.0, 3.0], false);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
        let (m, se) = mean_stderr(&[1.0, 3.0, 5.0, 7.0], true);
        assert_eq!(m, 4.0);
        assert!((se - 2.0).abs() < 1e-15);
    }
}

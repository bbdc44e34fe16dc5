use std::fs;

use clap::Args;
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use glq_core::gheat::{self, GridSpec, Payoff};
use glq_core::problem::{validate_problem, DEFAULT_DELTA_PD};
use glq_core::riccati::{self, RiccatiSolution, ADJOINT_TOL, DEFAULT_N_STEPS};
use glq_core::robust::{self, ExampleFamily, ExampleFamilyKind, RobustConfig, ScenarioFamily, SearchMethod};
use glq_core::sim::{self, SimConfig};
use glq_core::verify;
use glq_core::{config, AmbiguityBounds, Error, FeedbackControl, FeedbackLaw, LQProblem, VolatilityScenario};

use crate::output::OutDir;
use crate::{CliError, Common};

fn snapshot<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).expect("serializable arguments")
}

fn load(common: &Common) -> Result<LQProblem, CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config is required"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let p = config::load_problem(&text)?;
    let violations = validate_problem(&p, DEFAULT_DELTA_PD);
    if !violations.is_empty() {
        return Err(Error::Validation(violations).into());
    }
    Ok(p)
}

fn sim_config(common: &Common, horizon: f64, default_paths: usize, default_steps: usize) -> SimConfig {
    SimConfig {
        n_paths: common.paths.unwrap_or(default_paths),
        dt_sim: common.dt.unwrap_or(horizon / default_steps as f64),
        seed: common.seed,
        antithetic: false,
    }
}

fn reference_scenario(p: &LQProblem) -> Result<VolatilityScenario, CliError> {
    Ok(VolatilityScenario::constant(p.horizon, p.bounds.sigma_bar_sq())?)
}

fn scenario_json(s: &VolatilityScenario) -> Value {
    json!({
        "hash": s.content_hash(),
        "breakpoints": s.breakpoints(),
        "values": s.values(),
    })
}

fn flat_matrix(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Args, Serialize)]
pub struct SolveLqArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Riccati integration steps.
    #[arg(long, default_value_t = DEFAULT_N_STEPS)]
    pub steps: usize,
}

pub fn run_solve_lq(args: SolveLqArgs) -> Result<(), CliError> {
    let p = load(&args.common)?;
    let mut out = OutDir::open(&args.common.out, args.common.force)?;
    let ric = riccati::solve_riccati(&p, &reference_scenario(&p)?, args.steps)?;
    let law = riccati::optimal_feedback(&p, &ric)?;
    let (n, m) = (p.n, p.m);

    let mut header = vec!["t".to_string()];
    header.extend((0..n).flat_map(|i| (0..n).map(move |j| format!("P_{i}_{j}"))));
    header.extend((0..n).map(|i| format!("phi_{i}")));
    header.push("l".into());
    header.extend((0..m).flat_map(|i| (0..n).map(move |j| format!("K_{i}_{j}"))));
    header.extend((0..m).map(|i| format!("k_{i}")));
    let rows: Vec<Vec<f64>> = (0..ric.times.len())
        .map(|k| {
            let mut row = vec![ric.times[k]];
            row.extend(flat_matrix(&ric.p[k]).into_iter().flatten());
            row.extend(ric.phi[k].iter());
            row.push(ric.l[k]);
            row.extend(flat_matrix(&law.gain[k]).into_iter().flatten());
            row.extend(law.offset[k].iter());
            row
        })
        .collect();
    out.csv("riccati.csv", &header, &rows)?;
    out.json(
        "summary.json",
        &json!({
            "problem_hash": p.content_hash(),
            "n_steps": args.steps,
            "gamma": p.bounds.sigma_bar_sq(),
            "value": ric.initial_value(&p.x0),
            "P0": flat_matrix(&ric.p[0]),
            "phi0": ric.phi[0].as_slice(),
            "l0": ric.l[0],
            "K0": flat_matrix(&law.gain[0]),
            "k0": law.offset[0].as_slice(),
        }),
    )?;
    out.finish("solve-lq", Some(p.content_hash()), snapshot(&args))
}

#[derive(Debug, Args, Serialize)]
pub struct GheatArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// square, neg-square, abs, linear[:SLOPE], constant:C, call:K, put:K
    #[arg(long)]
    pub payoff: String,
    /// Horizon (default: the config's, else 1).
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub sbar2: Option<f64>,
    #[arg(long)]
    pub slow2: Option<f64>,
    #[arg(long, default_value_t = GridSpec::default().width_sd)]
    pub x_width_sd: f64,
    #[arg(long, default_value_t = GridSpec::default().n_space)]
    pub nx: usize,
    #[arg(long, default_value_t = GridSpec::default().cfl)]
    pub cfl: f64,
    /// Also write the stored solution layers as CSV.
    #[arg(long)]
    pub dump: bool,
}

pub fn parse_payoff(spec: &str) -> Result<Payoff, CliError> {
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => {
            let v: f64 = a
                .parse()
                .map_err(|_| CliError::config(format!("payoff parameter `{a}` is not a number")))?;
            (n, Some(v))
        }
        None => (spec, None),
    };
    let need = |v: Option<f64>| v.ok_or_else(|| CliError::config(format!("payoff `{name}` needs a parameter")));
    Ok(match name {
        "square" => Payoff::square(),
        "neg-square" => Payoff::neg_square(),
        "abs" => Payoff::abs(),
        "linear" => Payoff::linear(arg.unwrap_or(1.0)),
        "constant" => Payoff::constant(need(arg)?),
        "call" => Payoff::call(need(arg)?),
        "put" => Payoff::put(need(arg)?),
        _ => return Err(CliError::config(format!("unknown payoff `{spec}`"))),
    })
}

pub fn run_gheat(args: GheatArgs) -> Result<(), CliError> {
    let from_config = match &args.common.config {
        Some(_) => Some(load(&args.common)?),
        None => None,
    };
    let horizon = args
        .horizon
        .or(from_config.as_ref().map(|p| p.horizon))
        .unwrap_or(1.0);
    let sbar = args
        .sbar2
        .or(from_config.as_ref().map(|p| p.bounds.sigma_bar_sq()))
        .unwrap_or(1.0);
    let slow = args
        .slow2
        .or(from_config.as_ref().map(|p| p.bounds.sigma_low_sq()))
        .unwrap_or(sbar.min(0.5));
    let bounds = AmbiguityBounds::new(sbar, slow)?;
    let payoff = parse_payoff(&args.payoff)?;
    let spec = GridSpec {
        width_sd: args.x_width_sd,
        n_space: args.nx,
        cfl: args.cfl,
        ..GridSpec::default()
    };
    let grid = spec.grid_for(&bounds, horizon);
    let mut out = OutDir::open(&args.common.out, args.common.force)?;
    let sol = gheat::solve_g_heat(&payoff, horizon, &bounds, &grid)?;
    let value = sol.value_at(0.0);
    out.json(
        "gheat.json",
        &json!({
            "payoff": payoff.name(),
            "T": horizon,
            "sigma_bar_sq": sbar,
            "sigma_low_sq": slow,
            "grid": {
                "x_min": grid.x_min,
                "x_max": grid.x_max,
                "n_space": grid.n_space,
                "n_time": grid.n_time,
                "dt": grid.dt(horizon),
                "cfl_ratio": grid.cfl_ratio(horizon, &bounds),
            },
            "value": value,
            "warnings": sol.warnings,
        }),
    )?;
    if args.dump {
        let xs = grid.nodes();
        let rows: Vec<Vec<f64>> = sol
            .times
            .iter()
            .zip(&sol.u)
            .flat_map(|(&t, layer)| xs.iter().zip(layer).map(move |(&x, &u)| vec![t, x, u]))
            .collect();
        out.csv("gheat_solution.csv", &["t".into(), "x".into(), "u".into()], &rows)?;
    }
    out.finish("gheat", from_config.map(|p| p.content_hash()), snapshot(&args))
}

#[derive(Debug, Args, Serialize)]
pub struct RobustEvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Number of equal scenario intervals.
    #[arg(long, default_value_t = 20)]
    pub intervals: usize,
    /// bang-bang or ladder:K
    #[arg(long, default_value = "bang-bang")]
    pub levels: String,
    /// auto, exhaustive or coordinate
    #[arg(long, default_value = "auto")]
    pub method: String,
    /// Random restarts of coordinate ascent.
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    /// Riccati integration steps for the optimal feedback.
    #[arg(long, default_value_t = DEFAULT_N_STEPS)]
    pub steps: usize,
    /// Multiplies the optimal gain (1 = optimal control).
    #[arg(long, default_value_t = 1.0)]
    pub gain_scale: f64,
    /// Write this many sample paths under the worst-case scenario.
    #[arg(long, default_value_t = 0)]
    pub dump_paths: usize,
}

fn parse_family(intervals: usize, levels: &str) -> Result<ScenarioFamily, CliError> {
    if levels == "bang-bang" {
        return Ok(ScenarioFamily::bang_bang(intervals));
    }
    if let Some(k) = levels.strip_prefix("ladder:") {
        let k: usize = k
            .parse()
            .map_err(|_| CliError::config(format!("bad ladder size `{k}`")))?;
        return Ok(ScenarioFamily::ladder(intervals, k));
    }
    Err(CliError::config(format!("unknown level set `{levels}`")))
}

fn parse_method(method: &str, restarts: usize) -> Result<SearchMethod, CliError> {
    match method {
        "auto" => Ok(SearchMethod::Auto),
        "exhaustive" => Ok(SearchMethod::Exhaustive),
        "coordinate" => Ok(SearchMethod::CoordinateAscent { restarts }),
        _ => Err(CliError::config(format!("unknown search method `{method}`"))),
    }
}

pub fn run_robust_eval(args: RobustEvalArgs) -> Result<(), CliError> {
    let p = load(&args.common)?;
    let family = parse_family(args.intervals, &args.levels)?;
    let method = parse_method(&args.method, args.restarts)?;
    let mut out = OutDir::open(&args.common.out, args.common.force)?;
    let ric = riccati::solve_riccati(&p, &reference_scenario(&p)?, args.steps)?;
    let law = riccati::optimal_feedback(&p, &ric)?.map(|g| g * args.gain_scale, |o| o.clone());
    let ctrl = FeedbackControl::Feedback(law);
    let sim_cfg = sim_config(&args.common, p.horizon, 1000, 1000);
    let cfg = RobustConfig::new(sim_cfg).with_method(method);
    let res = robust::robust_cost(&p, &ctrl, &family, &cfg)?;
    let table: Vec<Value> = res
        .table
        .iter()
        .map(|e| json!({"hash": e.hash, "values": e.values, "mean": e.mean, "stderr": e.stderr}))
        .collect();
    out.json(
        "robust.json",
        &json!({
            "problem_hash": p.content_hash(),
            "control_hash": ctrl.content_hash(),
            "family": {
                "description": family.describe(),
                "n_intervals": family.n_intervals,
                "levels": family.level_values(&p.bounds),
            },
            "method": res.method.tag(),
            "n_paths": sim_cfg.n_paths,
            "dt_sim": sim_cfg.dt_sim,
            "seed": sim_cfg.seed,
            "value": res.value,
            "stderr": res.stderr,
            "argmax_scenario": scenario_json(&res.argmax_scenario),
            "table": table,
        }),
    )?;
    if args.dump_paths > 0 {
        let dump_cfg = SimConfig {
            n_paths: args.dump_paths,
            ..sim_cfg
        };
        let bundle = sim::simulate(&p, &ctrl, &res.argmax_scenario, &dump_cfg)?;
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..p.n).map(|i| format!("x_{i}")));
        header.extend((0..p.m).map(|i| format!("u_{i}")));
        let mut rows = Vec::new();
        for (i, (xs, us)) in bundle.x.iter().zip(&bundle.u).enumerate() {
            for (k, &t) in bundle.times.iter().enumerate() {
                let mut row = vec![i as f64, t];
                row.extend(xs[k].iter());
                row.extend(us[k].iter());
                rows.push(row);
            }
        }
        out.csv("paths.csv", &header, &rows)?;
        out.json(
            "paths_summary.json",
            &json!({
                "mean": bundle.mean,
                "stderr": bundle.stderr,
                "n_paths": dump_cfg.n_paths,
                "seed": dump_cfg.seed,
                "scenario_hash": res.argmax_scenario.content_hash(),
            }),
        )?;
    }
    out.finish("robust-eval", Some(p.content_hash()), snapshot(&args))
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyMpArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Riccati integration steps.
    #[arg(long, default_value_t = DEFAULT_N_STEPS)]
    pub steps: usize,
    /// Tolerance on max |H_u|.
    #[arg(long, default_value_t = 1e-6)]
    pub tol_hu: f64,
    /// Tolerance on per-path K̄(T) away from the reference scenario.
    #[arg(long, default_value_t = 1e-10)]
    pub tol_k: f64,
    /// Scenario intervals for the Gâteaux check.
    #[arg(long, default_value_t = 4)]
    pub intervals: usize,
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    bound: f64,
    /// Whether failure changes the exit code.
    asserted: bool,
    pass: bool,
}

fn check(name: &'static str, value: f64, bound: f64, asserted: bool, pass: bool) -> Check {
    Check {
        name,
        value,
        bound,
        asserted,
        pass,
    }
}

pub fn run_verify_mp(args: VerifyMpArgs) -> Result<(), CliError> {
    let p = load(&args.common)?;
    let mut out = OutDir::open(&args.common.out, args.common.force)?;
    let reference = reference_scenario(&p)?;
    let ric = riccati::solve_riccati(&p, &reference, args.steps)?;
    let law = riccati::optimal_feedback(&p, &ric)?;
    let ctrl = FeedbackControl::Feedback(law.clone());
    let cfg = sim_config(&args.common, p.horizon, 200, 1000);
    let mut checks = Vec::new();

    let suff = verify::sufficient_condition_check(&p, DEFAULT_DELTA_PD);
    let min_eig = suff.checks.iter().map(|c| c.min_eig).fold(f64::INFINITY, f64::min);
    checks.push(check("convexity premises", min_eig, -DEFAULT_DELTA_PD, true, suff.pass));

    let hu = verify::hamiltonian_stationarity(&p, &ric, &cfg)?;
    checks.push(check("max |H_u| under sigma_bar_sq", hu, args.tol_hu, true, hu <= args.tol_hu));

    let adj = adjoint_check(&p, &ric, &ctrl, &reference, &cfg)?;
    checks.push(check("adjoint closed form", adj, ADJOINT_TOL, true, adj <= ADJOINT_TOL));

    let k_ref = sim::k_residual(&p, &ctrl, &reference, &ric, &cfg)?;
    let k_ref_abs = k_ref.per_path.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    checks.push(check("K(T) under sigma_bar_sq", k_ref_abs, 0.0, true, k_ref_abs == 0.0));

    let low = VolatilityScenario::constant(p.horizon, p.bounds.sigma_low_sq())?;
    let k_low = sim::k_residual(&p, &ctrl, &low, &ric, &cfg)?;
    checks.push(check(
        "max per-path K(T) under sigma_low_sq",
        k_low.max_over_paths,
        args.tol_k,
        true,
        k_low.max_over_paths <= args.tol_k,
    ));
    checks.push(check(
        "mean K(T) under sigma_low_sq",
        k_low.mean,
        -3.0 * k_low.stderr,
        false,
        k_low.mean <= -3.0 * k_low.stderr,
    ));

    let vp = sim::verify_value_process(&p, &ric, &reference, &cfg)?;
    checks.push(check(
        "value-process identity, max deviation",
        vp.max_deviation,
        f64::NAN,
        false,
        true,
    ));

    let directions = verify::default_directions(&law, p.m);
    let vi = verify::variational_inequality_check(&p, &ric, &directions, &cfg)?;
    checks.push(check(
        "min E[Theta] over directions",
        vi.min_mean,
        -3.0 * vi.min_stderr,
        true,
        vi.min_mean >= -3.0 * vi.min_stderr,
    ));

    let mut unit = DVector::zeros(p.m);
    unit[0] = -1.0;
    let direction = FeedbackLaw::constant(p.horizon, nalgebra::DMatrix::zeros(p.m, p.n), unit);
    let family = ScenarioFamily::bang_bang(args.intervals);
    let g = verify::gateaux_check(
        &p,
        &law,
        &direction,
        &verify::DEFAULT_RHO_LADDER,
        &family,
        &RobustConfig::new(cfg),
    )?;
    checks.push(check(
        "Gateaux limit",
        g.limit,
        -3.0 * g.limit_stderr,
        true,
        g.limit >= -3.0 * g.limit_stderr,
    ));
    checks.push(check(
        "Gateaux quotient increase beyond stderr",
        g.monotonicity_excess,
        0.0,
        true,
        g.monotonicity_excess <= 0.0,
    ));
    checks.push(check(
        "Gateaux limit vs E[Theta] under worst case",
        (g.limit - g.theta_estimate).abs(),
        g.agreement_tol,
        false,
        g.agrees,
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| c.asserted && !c.pass).map(|c| c.name).collect();
    out.json(
        "verify.json",
        &json!({
            "problem_hash": p.content_hash(),
            "n_paths": cfg.n_paths,
            "dt_sim": cfg.dt_sim,
            "seed": cfg.seed,
            "ode_steps": args.steps,
            "checks": checks,
            "sufficiency": suff.checks.iter().map(|c| json!({
                "condition": c.condition, "time": c.time, "min_eig": c.min_eig, "pass": c.pass,
            })).collect::<Vec<_>>(),
            "k_residual_low": {"mean": k_low.mean, "stderr": k_low.stderr, "max_over_paths": k_low.max_over_paths},
            "variational_inequality": vi.per_direction.iter().map(|(m, s)| json!({"mean": m, "stderr": s})).collect::<Vec<_>>(),
            "gateaux": {
                "rho": g.rho_ladder,
                "quotients": g.quotients,
                "quotient_stderr": g.quotient_stderr,
                "limit": g.limit,
                "limit_stderr": g.limit_stderr,
                "theta_estimate": g.theta_estimate,
                "theta_stderr": g.theta_stderr,
                "multiplier": g.multiplier_note,
            },
            "pass": failed.is_empty(),
        }),
    )?;
    out.finish("verify-mp", Some(p.content_hash()), snapshot(&args))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Largest relative disagreement of the two adjoint `q` forms over a few paths.
fn adjoint_check(
    p: &LQProblem,
    ric: &RiccatiSolution,
    ctrl: &FeedbackControl,
    scenario: &VolatilityScenario,
    cfg: &SimConfig,
) -> Result<f64, CliError> {
    let few = SimConfig {
        n_paths: cfg.n_paths.min(8),
        ..*cfg
    };
    let bundle = sim::simulate(p, ctrl, scenario, &few)?;
    let mut worst = 0.0_f64;
    for (x, u) in bundle.x.iter().zip(&bundle.u) {
        match riccati::adjoint_from_riccati(p, ric, &bundle.times, x, u, ADJOINT_TOL) {
            Ok(a) => worst = worst.max(a.max_discrepancy),
            Err(Error::Inconsistency { discrepancy, .. }) => worst = worst.max(discrepancy),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(worst)
}

#[derive(Debug, Args, Serialize)]
pub struct ExampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 2.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sbar2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub slow2: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long = "N", default_value_t = 20)]
    pub n: usize,
    /// full or single-switch
    #[arg(long, default_value = "full")]
    pub family: String,
}

pub fn run_example_tstar(args: ExampleArgs) -> Result<(), CliError> {
    let bounds = AmbiguityBounds::new(args.sbar2, args.slow2)?;
    let kind = match args.family.as_str() {
        "full" => ExampleFamilyKind::FullBangBang,
        "single-switch" => ExampleFamilyKind::SingleSwitch,
        other => return Err(CliError::config(format!("unknown family `{other}`"))),
    };
    let mut out = OutDir::open(&args.common.out, args.common.force)?;
    let r = robust::example_worst_case(
        args.a,
        &bounds,
        args.horizon,
        &ExampleFamily {
            n_intervals: args.n,
            kind,
        },
    )?;
    out.json(
        "example.json",
        &json!({
            "a": args.a,
            "sigma_bar_sq": args.sbar2,
            "sigma_low_sq": args.slow2,
            "T": args.horizon,
            "N": args.n,
            "family": args.family,
            "t_star_numeric": r.t_star_numeric,
            "t_star_formula": r.t_star_formula,
            "value": r.value,
            "argmax_scenario": scenario_json(&r.argmax),
            "n_evaluated": r.n_evaluated,
        }),
    )?;
    out.finish("example-tstar", None, snapshot(&args))
}

//! Domain types for linear-quadratic control under volatility ambiguity.
//!
//! The driving noise is a scalar G-Brownian motion whose quadratic-variation
//! density is only known to lie in `[sigma_low_sq, sigma_bar_sq]`. The state
//! is `n`-dimensional and the control `m`-dimensional; every coefficient is a
//! right-continuous piecewise-constant function of time.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, min_sym_eig};

/// Default positive-definiteness threshold for "≫ 0" conditions.
pub const DEFAULT_DELTA_PD: f64 = 1e-8;

/// Relative tolerance used to decide whether two grid times coincide.
pub(crate) const TIME_EPS: f64 = 1e-10;

/// Bounds on the volatility of the scalar G-Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityBounds {
    sigma_bar_sq: f64,
    sigma_low_sq: f64,
}

impl AmbiguityBounds {
    pub fn new(sigma_bar_sq: f64, sigma_low_sq: f64) -> Result<Self> {
        if !(sigma_low_sq.is_finite() && sigma_bar_sq.is_finite()) {
            return Err(Error::InvalidInput("volatility bounds must be finite".into()));
        }
        if !(sigma_low_sq > 0.0 && sigma_low_sq <= sigma_bar_sq) {
            return Err(Error::InvalidInput(format!(
                "need 0 < sigma_low_sq <= sigma_bar_sq, got sigma_low_sq={sigma_low_sq}, sigma_bar_sq={sigma_bar_sq}"
            )));
        }
        Ok(Self {
            sigma_bar_sq,
            sigma_low_sq,
        })
    }

    pub fn sigma_bar_sq(&self) -> f64 {
        self.sigma_bar_sq
    }

    pub fn sigma_low_sq(&self) -> f64 {
        self.sigma_low_sq
    }

    pub fn contains(&self, gamma: f64) -> bool {
        gamma >= self.sigma_low_sq && gamma <= self.sigma_bar_sq
    }
}

/// Right-continuous piecewise-constant function on `[0, T]`.
///
/// Piece `k` is active on `[starts[k], starts[k+1])`; the last piece extends to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Piecewise<T> {
    starts: Vec<f64>,
    values: Vec<T>,
}

impl<T> Piecewise<T> {
    pub fn constant(value: T) -> Self {
        Self {
            starts: vec![0.0],
            values: vec![value],
        }
    }

    pub fn new(starts: Vec<f64>, values: Vec<T>) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "piecewise table needs matching non-empty starts/values, got {} and {}",
                starts.len(),
                values.len()
            )));
        }
        if starts[0] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "piecewise table must start at t=0, got {}",
                starts[0]
            )));
        }
        if starts.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "piecewise table times must be strictly ascending".into(),
            ));
        }
        Ok(Self { starts, values })
    }

    pub fn at(&self, t: f64) -> &T {
        let k = self.starts.partition_point(|&s| s <= t).max(1) - 1;
        &self.values[k]
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }
}

impl From<DMatrix<f64>> for Piecewise<DMatrix<f64>> {
    fn from(m: DMatrix<f64>) -> Self {
        Piecewise::constant(m)
    }
}

impl From<DVector<f64>> for Piecewise<DVector<f64>> {
    fn from(v: DVector<f64>) -> Self {
        Piecewise::constant(v)
    }
}

pub type MatrixFn = Piecewise<DMatrix<f64>>;
pub type VectorFn = Piecewise<DVector<f64>>;

/// Coefficients at one instant, as used inside a single integration step.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DVector<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Full coefficient set of the LQ problem.
///
/// State: `dx = (A x + B̃ u + b) dt + (C x + D u + σ) dB`, `x(0) = x0`.
/// Cost: `½ Ê[∫ (x'Qx + 2 u'Sx + u'Ru) dt + x(T)'L x(T)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LQProblem {
    pub horizon: f64,
    pub n: usize,
    pub m: usize,
    pub a: MatrixFn,
    pub b_tilde: MatrixFn,
    pub c: MatrixFn,
    pub d: MatrixFn,
    pub b: VectorFn,
    pub sigma: VectorFn,
    pub q: MatrixFn,
    pub s: MatrixFn,
    pub r: MatrixFn,
    pub l: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub bounds: AmbiguityBounds,
}

impl LQProblem {
    /// Builder with every coefficient defaulting to zero of the right shape.
    pub fn builder(n: usize, m: usize, horizon: f64, bounds: AmbiguityBounds) -> LQProblemBuilder {
        LQProblemBuilder::new(n, m, horizon, bounds)
    }

    pub fn coefficients_at(&self, t: f64) -> Coefficients {
        Coefficients {
            a: self.a.at(t).clone(),
            b_tilde: self.b_tilde.at(t).clone(),
            c: self.c.at(t).clone(),
            d: self.d.at(t).clone(),
            b: self.b.at(t).clone(),
            sigma: self.sigma.at(t).clone(),
            q: self.q.at(t).clone(),
            s: self.s.at(t).clone(),
            r: self.r.at(t).clone(),
        }
    }

    /// Every time at which some coefficient changes value, plus `0`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts = Vec::new();
        for f in [&self.a, &self.b_tilde, &self.c, &self.d, &self.q, &self.s, &self.r] {
            pts.extend_from_slice(f.starts());
        }
        for f in [&self.b, &self.sigma] {
            pts.extend_from_slice(f.starts());
        }
        linalg::merge_grids(pts, 0.0)
    }

    /// Shape and finiteness checks; run by the builder and the config loader.
    pub fn check_dimensions(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if n == 0 {
            return Err(Error::InvalidInput("state dimension n must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "horizon T must be positive, got {}",
                self.horizon
            )));
        }
        let mats: [(&str, &MatrixFn, usize, usize); 7] = [
            ("A", &self.a, n, n),
            ("B_tilde", &self.b_tilde, n, m),
            ("C", &self.c, n, n),
            ("D", &self.d, n, m),
            ("Q", &self.q, n, n),
            ("S", &self.s, m, n),
            ("R", &self.r, m, m),
        ];
        for (name, f, rows, cols) in mats {
            for v in f.values() {
                check_matrix(name, v, rows, cols)?;
            }
            if let Some(&last) = f.starts().last() {
                if last >= self.horizon {
                    return Err(Error::InvalidInput(format!(
                        "coefficient {name} has a piece starting at {last} >= T"
                    )));
                }
            }
        }
        for (name, f) in [("b", &self.b), ("sigma", &self.sigma)] {
            for v in f.values() {
                check_vector(name, v, n)?;
            }
            if let Some(&last) = f.starts().last() {
                if last >= self.horizon {
                    return Err(Error::InvalidInput(format!(
                        "coefficient {name} has a piece starting at {last} >= T"
                    )));
                }
            }
        }
        check_matrix("L", &self.l, n, n)?;
        check_vector("x0", &self.x0, n)?;
        Ok(())
    }

    /// Content hash of the canonical configuration text.
    pub fn content_hash(&self) -> String {
        let text = crate::config::to_config_string(self);
        short_hash(text.as_bytes())
    }
}

fn check_matrix(name: &str, v: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if v.nrows() != rows || v.ncols() != cols {
        return Err(Error::DimensionMismatch {
            name: name.to_string(),
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{}", v.nrows(), v.ncols()),
        });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(format!("coefficient {name} is not finite")));
    }
    Ok(())
}

fn check_vector(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            name: name.to_string(),
            expected: format!("length {len}"),
            found: format!("length {}", v.len()),
        });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(format!("coefficient {name} is not finite")));
    }
    Ok(())
}

pub struct LQProblemBuilder {
    p: LQProblem,
}

impl LQProblemBuilder {
    fn new(n: usize, m: usize, horizon: f64, bounds: AmbiguityBounds) -> Self {
        let zm = |r: usize, c: usize| Piecewise::constant(DMatrix::zeros(r, c));
        let zv = || Piecewise::constant(DVector::zeros(n));
        Self {
            p: LQProblem {
                horizon,
                n,
                m,
                a: zm(n, n),
                b_tilde: zm(n, m),
                c: zm(n, n),
                d: zm(n, m),
                b: zv(),
                sigma: zv(),
                q: zm(n, n),
                s: zm(m, n),
                r: zm(m, m),
                l: DMatrix::zeros(n, n),
                x0: DVector::zeros(n),
                bounds,
            },
        }
    }

    pub fn a(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.a = f.into();
        self
    }
    pub fn b_tilde(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.b_tilde = f.into();
        self
    }
    pub fn c(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.c = f.into();
        self
    }
    pub fn d(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.d = f.into();
        self
    }
    pub fn b(mut self, f: impl Into<VectorFn>) -> Self {
        self.p.b = f.into();
        self
    }
    pub fn sigma(mut self, f: impl Into<VectorFn>) -> Self {
        self.p.sigma = f.into();
        self
    }
    pub fn q(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.q = f.into();
        self
    }
    pub fn s(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.s = f.into();
        self
    }
    pub fn r(mut self, f: impl Into<MatrixFn>) -> Self {
        self.p.r = f.into();
        self
    }
    pub fn l(mut self, l: DMatrix<f64>) -> Self {
        self.p.l = l;
        self
    }
    pub fn x0(mut self, x0: DVector<f64>) -> Self {
        self.p.x0 = x0;
        self
    }

    pub fn build(self) -> Result<LQProblem> {
        self.p.check_dimensions()?;
        Ok(self.p)
    }
}

/// Scalar helpers for tests and demos: 1x1 matrix and length-1 vector.
pub fn mat1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn vec1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

/// Which standing condition a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `R ≫ 0`
    RPositive,
    /// `L ≫ 0`
    LPositive,
    /// `Q - S R⁻¹ Sᵀ ≥ 0`
    SchurNonnegative,
    /// `Q`, `R`, `L` symmetric
    Symmetry,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::RPositive => "R ≫ 0",
            Condition::LPositive => "L ≫ 0",
            Condition::SchurNonnegative => "Q−SR⁻¹Sᵀ ≥ 0",
            Condition::Symmetry => "symmetry of Q, R, L",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub condition: Condition,
    /// `None` for time-independent conditions (on `L`).
    pub time: Option<f64>,
    pub min_eig: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.time {
            Some(t) => write!(
                f,
                "{} fails at t={t}: min eigenvalue {:.3e}",
                self.condition, self.min_eig
            ),
            None => write!(f, "{} fails: min eigenvalue {:.3e}", self.condition, self.min_eig),
        }
    }
}

/// Checks the standing conditions at every coefficient breakpoint.
///
/// `R` and `L` must have minimum eigenvalue at least `delta_pd`; the Schur
/// complement `Q − S R⁻¹ Sᵀ` must have minimum eigenvalue at least `-delta_pd`.
pub fn validate_problem(p: &LQProblem, delta_pd: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let sym_tol = 1e-12;
    for t in p.breakpoints() {
        let q = p.q.at(t);
        let r = p.r.at(t);
        let s = p.s.at(t);
        if linalg::max_abs(&(q - q.transpose())) > sym_tol * (1.0 + linalg::max_abs(q))
            || linalg::max_abs(&(r - r.transpose())) > sym_tol * (1.0 + linalg::max_abs(r))
        {
            out.push(Violation {
                condition: Condition::Symmetry,
                time: Some(t),
                min_eig: f64::NAN,
            });
        }
        let r_min = min_sym_eig(r);
        if !(r_min >= delta_pd) {
            out.push(Violation {
                condition: Condition::RPositive,
                time: Some(t),
                min_eig: r_min,
            });
            continue;
        }
        if p.m > 0 {
            let r_inv = linalg::symmetrized(r)
                .try_inverse()
                .expect("positive definite R is invertible");
            let schur = q - s.transpose() * r_inv * s;
            let e = min_sym_eig(&schur);
            if !(e >= -delta_pd) {
                out.push(Violation {
                    condition: Condition::SchurNonnegative,
                    time: Some(t),
                    min_eig: e,
                });
            }
        }
    }
    if linalg::max_abs(&(&p.l - p.l.transpose())) > sym_tol * (1.0 + linalg::max_abs(&p.l)) {
        out.push(Violation {
            condition: Condition::Symmetry,
            time: None,
            min_eig: f64::NAN,
        });
    }
    let l_min = min_sym_eig(&p.l);
    if !(l_min >= delta_pd) {
        out.push(Violation {
            condition: Condition::LPositive,
            time: None,
            min_eig: l_min,
        });
    }
    out
}

/// A deterministic piecewise-constant quadratic-variation density `γ(t)`,
/// standing for one measure of the family representing the G-expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityScenario {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl VolatilityScenario {
    /// `breakpoints` are `0 = t_0 < … < t_N = T`, `values` has length `N`.
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints.len() != values.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "scenario needs N+1 breakpoints for N values, got {} and {}",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::InvalidInput("scenario must start at t=0".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "scenario breakpoints must be strictly ascending".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "scenario values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn constant(horizon: f64, gamma: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![gamma])
    }

    /// `N` equal intervals on `[0, T]` with the given values.
    pub fn uniform(horizon: f64, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let bp = uniform_breakpoints(horizon, n);
        Self::new(bp, values)
    }

    /// Same as [`VolatilityScenario::new`] but also checks `values ⊂ [σ̲², σ̄²]`.
    pub fn within(bounds: &AmbiguityBounds, breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = Self::new(breakpoints, values)?;
        s.check_bounds(bounds)?;
        Ok(s)
    }

    pub fn check_bounds(&self, bounds: &AmbiguityBounds) -> Result<()> {
        if let Some(v) = self.values.iter().find(|v| !bounds.contains(**v)) {
            return Err(Error::InvalidInput(format!(
                "scenario value {v} outside [{}, {}]",
                bounds.sigma_low_sq(),
                bounds.sigma_bar_sq()
            )));
        }
        Ok(())
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().expect("non-empty")
    }

    /// `γ(t)`, right-continuous; `γ(T)` is the last value.
    pub fn gamma_at(&self, t: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&s| s <= t).max(1) - 1;
        self.values[k.min(self.values.len() - 1)]
    }

    /// `⟨B⟩(t) = ∫₀ᵗ γ(s) ds`, exact on the piecewise structure.
    pub fn quadratic_variation(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &g) in self.values.iter().enumerate() {
            let (a, b) = (self.breakpoints[k], self.breakpoints[k + 1]);
            if t <= a {
                break;
            }
            acc += g * (t.min(b) - a);
        }
        acc
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.breakpoints.iter().chain(self.values.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub(crate) fn uniform_breakpoints(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| {
            if k == n {
                horizon
            } else {
                horizon * k as f64 / n as f64
            }
        })
        .collect()
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// A control: either a linear feedback law `u = −K(t) x − k(t)` tabulated on a
/// time grid, an explicit per-sample open-loop path, or a convex perturbation
/// of one feedback law toward another.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackControl {
    Feedback(FeedbackLaw),
    /// `paths[i][k]` is the control of sample `i` at `times[k]`.
    OpenLoop {
        times: Vec<f64>,
        paths: Vec<Vec<DVector<f64>>>,
    },
    /// `u = ū + ρ (v − ū)` with both `ū` and `v` evaluated on the state path
    /// generated by `base` alone (same noise).
    Perturbed {
        base: FeedbackLaw,
        direction: FeedbackLaw,
        rho: f64,
    },
}

/// Gain and offset paths of a linear feedback law, linearly interpolated in time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub times: Vec<f64>,
    pub gain: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
}

impl FeedbackLaw {
    pub fn new(times: Vec<f64>, gain: Vec<DMatrix<f64>>, offset: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != gain.len() || times.len() != offset.len() {
            return Err(Error::DimensionMismatch {
                name: "feedback law".into(),
                expected: format!("{} gains and offsets", times.len()),
                found: format!("{} gains, {} offsets", gain.len(), offset.len()),
            });
        }
        Ok(Self { times, gain, offset })
    }

    /// Constant law `u = −K x − k` on `[0, T]`.
    pub fn constant(horizon: f64, gain: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self {
            times: vec![0.0, horizon],
            gain: vec![gain.clone(), gain],
            offset: vec![offset.clone(), offset],
        }
    }

    pub fn zero(p: &LQProblem) -> Self {
        Self::constant(p.horizon, DMatrix::zeros(p.m, p.n), DVector::zeros(p.m))
    }

    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        let (j, w) = linalg::locate(&self.times, t);
        linalg::lerp_matrix(&self.gain, j, w)
    }

    pub fn offset_at(&self, t: f64) -> DVector<f64> {
        let (j, w) = linalg::locate(&self.times, t);
        linalg::lerp_vector(&self.offset, j, w)
    }

    /// `−K(t) x − k(t)`.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        -(self.gain_at(t) * x) - self.offset_at(t)
    }

    /// `α·self + β·other` on the union of both time grids.
    pub fn combine(&self, alpha: f64, other: &FeedbackLaw, beta: f64) -> Result<Self> {
        let mut pts = self.times.clone();
        pts.extend_from_slice(&other.times);
        let times = linalg::merge_grids(pts, TIME_EPS);
        let gain = times
            .iter()
            .map(|&t| self.gain_at(t) * alpha + other.gain_at(t) * beta)
            .collect();
        let offset = times
            .iter()
            .map(|&t| self.offset_at(t) * alpha + other.offset_at(t) * beta)
            .collect();
        Self::new(times, gain, offset)
    }

    /// New law with gain and offset mapped pointwise.
    pub fn map(
        &self,
        mut fg: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>,
        mut fo: impl FnMut(&DVector<f64>) -> DVector<f64>,
    ) -> Self {
        Self {
            times: self.times.clone(),
            gain: self.gain.iter().map(&mut fg).collect(),
            offset: self.offset.iter().map(&mut fo).collect(),
        }
    }
}

impl FeedbackControl {
    pub fn feedback(law: FeedbackLaw) -> Self {
        FeedbackControl::Feedback(law)
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |x: f64| h.update(x.to_bits().to_le_bytes());
        let law = |l: &FeedbackLaw, put: &mut dyn FnMut(f64)| {
            for t in &l.times {
                put(*t);
            }
            for g in &l.gain {
                g.iter().for_each(|v| put(*v));
            }
            for o in &l.offset {
                o.iter().for_each(|v| put(*v));
            }
        };
        match self {
            FeedbackControl::Feedback(l) => {
                put(0.0);
                law(l, &mut put);
            }
            FeedbackControl::OpenLoop { times, paths } => {
                put(1.0);
                times.iter().for_each(|t| put(*t));
                for p in paths {
                    for u in p {
                        u.iter().for_each(|v| put(*v));
                    }
                }
            }
            FeedbackControl::Perturbed { base, direction, rho } => {
                put(2.0);
                put(*rho);
                law(base, &mut put);
                law(direction, &mut put);
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

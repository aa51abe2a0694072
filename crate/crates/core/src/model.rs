//! Problem instances: linear state coefficients, separable convex costs, and
//! the structural constants the solver relies on.
//!
//! All dependence on the minor population's law is in scalar form: each
//! measure argument is an empirical average of a kernel `y -> k(t, y)`. The
//! averages needed by a model are collected once per (scenario, step) in a
//! [`MeasureSummary`].

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MfgError, Result};
use crate::lq_oracle::LQSpec;
use crate::stochastics::{w2_distance_empirical, InitialLaw, TimeGrid};

pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Scalar-form measure kernel `(t, y)`.
pub type Kernel = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `(t, x0, u0, moments)`
pub type MajorRunningFn = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
/// `(x0, moments)`
pub type MajorTerminalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x, u, x0)`
pub type ControlCostFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(t, x, moments, x0)`
pub type MeasureCostFn = Arc<dyn Fn(f64, f64, &[f64], f64) -> f64 + Send + Sync>;
/// `(x, moments, x0)`
pub type MinorTerminalFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;

/// Central finite-difference step used by the derivative fallback.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `phi(t, x, u, m) = mean_m[k(t, .)] + slope_x(t) x + slope_u(t) u`.
#[derive(Clone)]
pub struct LinearCoefficient {
    pub intercept_kernel: Kernel,
    pub slope_x: TimeFn,
    pub slope_u: TimeFn,
}

impl LinearCoefficient {
    pub fn new(intercept_kernel: Kernel, slope_x: TimeFn, slope_u: TimeFn) -> Self {
        Self { intercept_kernel, slope_x, slope_u }
    }

    pub fn constant(intercept: f64, slope_x: f64, slope_u: f64) -> Self {
        Self::affine(intercept, 0.0, slope_x, slope_u)
    }

    /// Intercept kernel `c + a y`, i.e. `c + a * mean(m)` after averaging.
    pub fn affine(constant: f64, slope_y: f64, slope_x: f64, slope_u: f64) -> Self {
        Self {
            intercept_kernel: Arc::new(move |_, y| constant + slope_y * y),
            slope_x: Arc::new(move |_| slope_x),
            slope_u: Arc::new(move |_| slope_u),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0, 0.0, 0.0)
    }

    /// Evaluates with an already averaged intercept.
    #[inline]
    pub fn eval(&self, t: f64, x: f64, u: f64, intercept: f64) -> f64 {
        intercept + (self.slope_x)(t) * x + (self.slope_u)(t) * u
    }
}

/// Index into [`ModelSpec::coeffs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coef {
    MajorDrift = 0,
    MajorVol = 1,
    MinorDrift = 2,
    MinorVol = 3,
    MinorCommonVol = 4,
}

impl Coef {
    pub const ALL: [Coef; 5] =
        [Coef::MajorDrift, Coef::MajorVol, Coef::MinorDrift, Coef::MinorVol, Coef::MinorCommonVol];

    pub fn name(self) -> &'static str {
        match self {
            Coef::MajorDrift => "b0",
            Coef::MajorVol => "sigma0",
            Coef::MinorDrift => "b",
            Coef::MinorVol => "sigma",
            Coef::MinorCommonVol => "sigma_tilde",
        }
    }
}

/// Major running cost `f0`, terminal cost `g0` and their derivatives.
#[derive(Clone)]
pub struct MajorCostSpec {
    pub f0: MajorRunningFn,
    pub f0_x: MajorRunningFn,
    pub f0_u: MajorRunningFn,
    pub g0: MajorTerminalFn,
    pub g0_x: MajorTerminalFn,
    /// `Some(r)` registers `f0_u(t, x, u, m) = r u + f0_u(t, x, 0, m)`, which
    /// lets the minimizer use a closed form.
    pub control_curvature: Option<f64>,
}

impl MajorCostSpec {
    /// Builds derivatives by central finite differences.
    pub fn with_numeric_derivatives(f0: MajorRunningFn, g0: MajorTerminalFn) -> Self {
        let fx = f0.clone();
        let fu = f0.clone();
        let gx = g0.clone();
        Self {
            f0_x: Arc::new(move |t, x, u, m| central_difference(|x| fx(t, x, u, m), x)),
            f0_u: Arc::new(move |t, x, u, m| central_difference(|u| fu(t, x, u, m), u)),
            g0_x: Arc::new(move |x, m| central_difference(|x| gx(x, m), x)),
            f0,
            g0,
            control_curvature: None,
        }
    }
}

/// Minor costs `f = f1(t, x, u, x0) + f2(t, x, m, x0)` and `g(x, m, x0)`.
#[derive(Clone)]
pub struct MinorCostSpec {
    pub f1: ControlCostFn,
    pub f1_x: ControlCostFn,
    pub f1_u: ControlCostFn,
    pub f2: MeasureCostFn,
    pub f2_x: MeasureCostFn,
    pub g: MinorTerminalFn,
    pub g_x: MinorTerminalFn,
    pub control_curvature: Option<f64>,
}

impl MinorCostSpec {
    pub fn with_numeric_derivatives(f1: ControlCostFn, f2: MeasureCostFn, g: MinorTerminalFn) -> Self {
        let (a, b, c, d) = (f1.clone(), f1.clone(), f2.clone(), g.clone());
        Self {
            f1_x: Arc::new(move |t, x, u, x0| central_difference(|x| a(t, x, u, x0), x)),
            f1_u: Arc::new(move |t, x, u, x0| central_difference(|u| b(t, x, u, x0), u)),
            f2_x: Arc::new(move |t, x, m, x0| central_difference(|x| c(t, x, m, x0), x)),
            g_x: Arc::new(move |x, m, x0| central_difference(|x| d(x, m, x0), x)),
            f1,
            f2,
            g,
            control_curvature: None,
        }
    }

    pub fn f(&self, t: f64, x: f64, u: f64, moments: &[f64], x0: f64) -> f64 {
        (self.f1)(t, x, u, x0) + (self.f2)(t, x, moments, x0)
    }
}

/// Declared Lipschitz and convexity constants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Constants {
    /// Common bound `L`.
    pub big_l: f64,
    /// `L_m`: Lipschitz constant of the minor intercepts in the measure.
    pub minor_measure_lip: f64,
    /// `l_m`: Lipschitz constant of the major intercepts and cost
    /// derivatives in the measure.
    pub major_measure_lip: f64,
    /// `l_{x0}`: Lipschitz constant of the minor cost derivatives in `x0`.
    pub major_state_lip: f64,
    /// `C_{f0}`
    pub major_convexity: f64,
    /// `C_f`
    pub minor_convexity: f64,
}

/// Averages of every measure kernel a model needs, for one empirical law.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSummary {
    pub mean: f64,
    pub intercepts: [f64; 5],
    pub moments: Vec<f64>,
}

/// A full problem instance.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    /// `b0, sigma0, b, sigma, sigma_tilde`, indexed by [`Coef`].
    pub coeffs: [LinearCoefficient; 5],
    pub major_cost: MajorCostSpec,
    pub minor_cost: MinorCostSpec,
    /// Kernels whose averages are passed to the costs as `moments`.
    pub measure_moments: Vec<Kernel>,
    pub constants: Constants,
    pub horizon: f64,
    pub init_major: InitialLaw,
    pub init_minor: InitialLaw,
    /// Present when the instance belongs to the linear-quadratic family.
    pub lq: Option<LQSpec>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("constants", &self.constants)
            .field("horizon", &self.horizon)
            .field("init_major", &self.init_major)
            .field("init_minor", &self.init_minor)
            .field("lq", &self.lq)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn coef(&self, c: Coef) -> &LinearCoefficient {
        &self.coeffs[c as usize]
    }

    /// Averages every kernel over `states`. Each average is accumulated as
    /// offsets from the first sample, so a kernel constant in `y` averages
    /// to its value exactly whatever the number of states.
    pub fn summarize(&self, t: f64, states: &[f64]) -> MeasureSummary {
        let Some(&y0) = states.first() else {
            return MeasureSummary { mean: 0.0, intercepts: [0.0; 5], moments: vec![0.0; self.measure_moments.len()] };
        };
        let n = states.len() as f64;
        let base_i: [f64; 5] = std::array::from_fn(|c| (self.coeffs[c].intercept_kernel)(t, y0));
        let base_m: Vec<f64> = self.measure_moments.iter().map(|k| k(t, y0)).collect();
        let mut mean = 0.0;
        let mut intercepts = [0.0; 5];
        let mut moments = vec![0.0; self.measure_moments.len()];
        for &y in &states[1..] {
            mean += y - y0;
            for ((acc, c), b) in intercepts.iter_mut().zip(&self.coeffs).zip(&base_i) {
                *acc += (c.intercept_kernel)(t, y) - b;
            }
            for ((acc, k), b) in moments.iter_mut().zip(&self.measure_moments).zip(&base_m) {
                *acc += k(t, y) - b;
            }
        }
        let mean = y0 + mean / n;
        intercepts.iter_mut().zip(&base_i).for_each(|(v, b)| *v = b + *v / n);
        moments.iter_mut().zip(&base_m).for_each(|(v, b)| *v = b + *v / n);
        MeasureSummary { mean, intercepts, moments }
    }

    #[inline]
    pub fn eval_coef(&self, c: Coef, t: f64, x: f64, u: f64, m: &MeasureSummary) -> f64 {
        self.coeffs[c as usize].eval(t, x, u, m.intercepts[c as usize])
    }

    #[inline]
    pub fn slope_x(&self, c: Coef, t: f64) -> f64 {
        (self.coeffs[c as usize].slope_x)(t)
    }

    #[inline]
    pub fn slope_u(&self, c: Coef, t: f64) -> f64 {
        (self.coeffs[c as usize].slope_u)(t)
    }

    /// `dH0/dx0 = b0_x p0 + sigma0_x q0 + f0_x`.
    pub fn major_h_x(&self, t: f64, x0: f64, p0: f64, q0: f64, u0: f64, m: &MeasureSummary) -> f64 {
        self.slope_x(Coef::MajorDrift, t) * p0
            + self.slope_x(Coef::MajorVol, t) * q0
            + (self.major_cost.f0_x)(t, x0, u0, &m.moments)
    }

    /// `dH/dx = b_x p + sigma_x q + sigma~_x q~ + f1_x + f2_x`.
    #[allow(clippy::too_many_arguments)]
    pub fn minor_h_x(
        &self,
        t: f64,
        x: f64,
        p: f64,
        q: f64,
        q_tilde: f64,
        u: f64,
        m: &MeasureSummary,
        x0: f64,
    ) -> f64 {
        self.slope_x(Coef::MinorDrift, t) * p
            + self.slope_x(Coef::MinorVol, t) * q
            + self.slope_x(Coef::MinorCommonVol, t) * q_tilde
            + (self.minor_cost.f1_x)(t, x, u, x0)
            + (self.minor_cost.f2_x)(t, x, &m.moments, x0)
    }

    pub fn default_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, 100)
    }
}

/// `max(L_m / C_f, l_{x0} l_m)`: the quantity that must stay below a small
/// threshold for unique solvability to be certified.
pub fn coupling_budget(spec: &ModelSpec) -> f64 {
    let c = &spec.constants;
    (c.minor_measure_lip / c.minor_convexity).max(c.major_state_lip * c.major_measure_lip)
}

/// Outcome of one sampled assumption check.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest amount by which the sampled inequality was violated (<= 0 if
    /// it always held).
    pub worst_violation: f64,
    pub worst_sample: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<28} {}  worst violation {:+.3e}  at {}",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.worst_violation,
                c.worst_sample
            )?;
        }
        Ok(())
    }
}

struct Tracker {
    name: &'static str,
    tol: f64,
    worst: f64,
    sample: String,
}

impl Tracker {
    fn new(name: &'static str, tol: f64) -> Self {
        Self { name, tol, worst: f64::NEG_INFINITY, sample: "-".into() }
    }

    /// Records `violation`, discounting rounding error relative to `scale`.
    fn record(&mut self, violation: f64, scale: f64, sample: impl FnOnce() -> String) {
        let v = violation - 1e-12 * (1.0 + scale.abs());
        if v > self.worst {
            self.worst = v;
            self.sample = sample();
        }
    }

    fn finish(self) -> AssumptionCheck {
        let worst = if self.worst.is_finite() { self.worst } else { 0.0 };
        AssumptionCheck { name: self.name, passed: worst <= self.tol, worst_violation: worst, worst_sample: self.sample }
    }
}

fn finite(function: &'static str, v: f64, tuple: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MfgError::ModelEvaluation { function, tuple: tuple() })
    }
}

const BOX: f64 = 5.0;
const ENSEMBLE: usize = 8;
const FD_REL_TOL: f64 = 1e-5;

/// Monte Carlo spot checks of the standing assumptions. States, controls and
/// particles are drawn from `[-5, 5]`, times from the knots of a 100-step grid.
/// These are best-effort checks: a pass means no sampled violation exceeded
/// `tol`, not that the assumption holds everywhere.
pub fn validate_assumptions(spec: &ModelSpec, sample_budget: usize, tol: f64) -> Result<ValidationReport> {
    if sample_budget == 0 {
        return Err(MfgError::InvalidArgument("sample_budget must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(MfgError::InvalidArgument("tol must be positive".into()));
    }
    let grid = spec.default_grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_a55e);
    let c = spec.constants;
    let mut checks = Vec::new();

    // Declared constants.
    let mut t = Tracker::new("constants", tol);
    t.record(1.0 - c.big_l, 0.0, || format!("L = {}", c.big_l));
    t.record(1.0 / c.big_l - c.major_convexity, 0.0, || format!("C_f0 = {}", c.major_convexity));
    t.record(1.0 / c.big_l - c.minor_convexity, 0.0, || format!("C_f = {}", c.minor_convexity));
    let max_lip = c.minor_measure_lip.max(c.major_measure_lip).max(c.major_state_lip);
    t.record(max_lip - c.big_l, 0.0, || format!("max(L_m, l_m, l_x0) = {max_lip}"));
    for v in [c.minor_measure_lip, c.major_measure_lip, c.major_state_lip] {
        t.record(-v, 0.0, || format!("negative constant {v}"));
    }
    checks.push(t.finish());

    // Bounded slopes on the grid.
    let mut t = Tracker::new("slopes_bounded", tol);
    for k in 0..=grid.n_steps() {
        let tk = grid.t(k);
        for coef in Coef::ALL {
            let sx = finite("slope_x", spec.slope_x(coef, tk), || format!("{} at t = {tk}", coef.name()))?;
            let su = finite("slope_u", spec.slope_u(coef, tk), || format!("{} at t = {tk}", coef.name()))?;
            t.record(sx.abs().max(su.abs()) - c.big_l, 0.0, || {
                format!("{} at t = {tk}: slopes ({sx}, {su})", coef.name())
            });
        }
    }
    checks.push(t.finish());

    let draw_t = |rng: &mut ChaCha8Rng| grid.t(rng.random_range(0..=grid.n_steps()));
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(-BOX..BOX);
    let draw_ensemble = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..ENSEMBLE).map(|_| rng.random_range(-BOX..BOX)).collect() };

    // Kernels Lipschitz in y.
    let mut t = Tracker::new("kernel_lipschitz", tol);
    for _ in 0..sample_budget {
        let (tk, y1, y2) = (draw_t(&mut rng), draw(&mut rng), draw(&mut rng));
        let kernels = spec
            .coeffs
            .iter()
            .map(|c| c.intercept_kernel.clone())
            .chain(spec.measure_moments.iter().cloned());
        for (idx, k) in kernels.enumerate() {
            let a = finite("measure kernel", k(tk, y1), || format!("kernel {idx} at (t={tk}, y={y1})"))?;
            let b = finite("measure kernel", k(tk, y2), || format!("kernel {idx} at (t={tk}, y={y2})"))?;
            t.record((a - b).abs() - c.big_l * (y1 - y2).abs(), a.abs().max(b.abs()), || {
                format!("kernel {idx}, t={tk}, y=({y1}, {y2})")
            });
        }
    }
    checks.push(t.finish());

    // Major convexity.
    let mc = &spec.major_cost;
    let mut t = Tracker::new("major_convexity", tol);
    let mut tg = Tracker::new("major_terminal_convexity", tol);
    for _ in 0..sample_budget {
        let tk = draw_t(&mut rng);
        let (x1, x2, u1, u2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let m = spec.summarize(tk, &draw_ensemble(&mut rng)).moments;
        let tup = || format!("t={tk}, x0=({x1}, {x2}), u0=({u1}, {u2})");
        let f1v = finite("f0", (mc.f0)(tk, x1, u1, &m), tup)?;
        let f2v = finite("f0", (mc.f0)(tk, x2, u2, &m), tup)?;
        let fx = finite("f0_x", (mc.f0_x)(tk, x1, u1, &m), tup)?;
        let fu = finite("f0_u", (mc.f0_u)(tk, x1, u1, &m), tup)?;
        let lhs = f2v - f1v - fx * (x2 - x1) - fu * (u2 - u1);
        let rhs = c.major_convexity * (u2 - u1).powi(2);
        t.record(rhs - lhs, f1v.abs().max(f2v.abs()), tup);
        let g1 = finite("g0", (mc.g0)(x1, &m), tup)?;
        let g2 = finite("g0", (mc.g0)(x2, &m), tup)?;
        let gx = finite("g0_x", (mc.g0_x)(x1, &m), tup)?;
        tg.record(-(g2 - g1 - gx * (x2 - x1)), g1.abs().max(g2.abs()), tup);
    }
    checks.push(t.finish());
    checks.push(tg.finish());

    // Minor convexity: f1 jointly with modulus C_f in u, f2 and g in x.
    let nc = &spec.minor_cost;
    let mut t1 = Tracker::new("minor_convexity", tol);
    let mut t2 = Tracker::new("minor_measure_cost_convexity", tol);
    let mut tg = Tracker::new("minor_terminal_convexity", tol);
    for _ in 0..sample_budget {
        let tk = draw_t(&mut rng);
        let (x1, x2, u1, u2, x0) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let m = spec.summarize(tk, &draw_ensemble(&mut rng)).moments;
        let tup = || format!("t={tk}, x=({x1}, {x2}), u=({u1}, {u2}), x0={x0}");
        let a = finite("f1", (nc.f1)(tk, x1, u1, x0), tup)?;
        let b = finite("f1", (nc.f1)(tk, x2, u2, x0), tup)?;
        let fx = finite("f1_x", (nc.f1_x)(tk, x1, u1, x0), tup)?;
        let fu = finite("f1_u", (nc.f1_u)(tk, x1, u1, x0), tup)?;
        let lhs = b - a - fx * (x2 - x1) - fu * (u2 - u1);
        t1.record(c.minor_convexity * (u2 - u1).powi(2) - lhs, a.abs().max(b.abs()), tup);
        let a = finite("f2", (nc.f2)(tk, x1, &m, x0), tup)?;
        let b = finite("f2", (nc.f2)(tk, x2, &m, x0), tup)?;
        let fx = finite("f2_x", (nc.f2_x)(tk, x1, &m, x0), tup)?;
        t2.record(-(b - a - fx * (x2 - x1)), a.abs().max(b.abs()), tup);
        let a = finite("g", (nc.g)(x1, &m, x0), tup)?;
        let b = finite("g", (nc.g)(x2, &m, x0), tup)?;
        let gx = finite("g_x", (nc.g_x)(x1, &m, x0), tup)?;
        tg.record(-(b - a - gx * (x2 - x1)), a.abs().max(b.abs()), tup);
    }
    checks.push(t1.finish());
    checks.push(t2.finish());
    checks.push(tg.finish());

    // Weak monotonicity on paired ensembles.
    let mut t = Tracker::new("weak_monotonicity", tol);
    for _ in 0..sample_budget {
        let tk = draw_t(&mut rng);
        let x0 = draw(&mut rng);
        let xi = draw_ensemble(&mut rng);
        let xi_p = draw_ensemble(&mut rng);
        let (v_f, v_g) = monotonicity_pairing(spec, tk, x0, &xi, &xi_p)?;
        let scale = xi.iter().chain(&xi_p).fold(0.0f64, |a, v| a.max(v.abs()));
        t.record(-v_f.min(v_g), scale, || format!("t={tk}, x0={x0}, xi={xi:?}, xi'={xi_p:?}"));
    }
    checks.push(t.finish());

    // Declared measure and x0 Lipschitz constants.
    let mut tm = Tracker::new("minor_measure_lipschitz", tol);
    let mut t0 = Tracker::new("major_measure_lipschitz", tol);
    let mut tx = Tracker::new("major_state_lipschitz", tol);
    for _ in 0..sample_budget {
        let tk = draw_t(&mut rng);
        let (ea, eb) = (draw_ensemble(&mut rng), draw_ensemble(&mut rng));
        let w2 = w2_distance_empirical(&ea, &eb)?;
        let (sa, sb) = (spec.summarize(tk, &ea), spec.summarize(tk, &eb));
        for coef in [Coef::MinorDrift, Coef::MinorVol, Coef::MinorCommonVol] {
            let d = (sa.intercepts[coef as usize] - sb.intercepts[coef as usize]).abs();
            tm.record(d - c.minor_measure_lip * w2, d, || format!("{} intercept, t={tk}", coef.name()));
        }
        let (x, u) = (draw(&mut rng), draw(&mut rng));
        let mut major_gaps = vec![];
        for coef in [Coef::MajorDrift, Coef::MajorVol] {
            major_gaps.push((coef.name(), (sa.intercepts[coef as usize] - sb.intercepts[coef as usize]).abs()));
        }
        major_gaps.push(("f0_x", ((mc.f0_x)(tk, x, u, &sa.moments) - (mc.f0_x)(tk, x, u, &sb.moments)).abs()));
        major_gaps.push(("f0_u", ((mc.f0_u)(tk, x, u, &sa.moments) - (mc.f0_u)(tk, x, u, &sb.moments)).abs()));
        major_gaps.push(("g0_x", ((mc.g0_x)(x, &sa.moments) - (mc.g0_x)(x, &sb.moments)).abs()));
        for (name, d) in major_gaps {
            t0.record(d - c.major_measure_lip * w2, d, || format!("{name}, t={tk}, x0={x}, u0={u}"));
        }
        let (x0a, x0b) = (draw(&mut rng), draw(&mut rng));
        let fx = |x0: f64| (nc.f1_x)(tk, x, u, x0) + (nc.f2_x)(tk, x, &sa.moments, x0);
        let fu = |x0: f64| (nc.f1_u)(tk, x, u, x0);
        let gx = |x0: f64| (nc.g_x)(x, &sa.moments, x0);
        for (name, d) in [
            ("f_x", (fx(x0a) - fx(x0b)).abs()),
            ("f_u", (fu(x0a) - fu(x0b)).abs()),
            ("g_x", (gx(x0a) - gx(x0b)).abs()),
        ] {
            tx.record(d - c.major_state_lip * (x0a - x0b).abs(), d, || {
                format!("{name}, t={tk}, x={x}, u={u}, x0=({x0a}, {x0b})")
            });
        }
    }
    checks.push(tm.finish());
    checks.push(t0.finish());
    checks.push(tx.finish());

    // Analytic derivatives against central differences.
    let mut t = Tracker::new("derivative_consistency", tol.max(FD_REL_TOL));
    for _ in 0..sample_budget {
        let tk = draw_t(&mut rng);
        let (x, u, x0) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let m = spec.summarize(tk, &draw_ensemble(&mut rng)).moments;
        let pairs = [
            ("f0_x", (mc.f0_x)(tk, x, u, &m), central_difference(|x| (mc.f0)(tk, x, u, &m), x)),
            ("f0_u", (mc.f0_u)(tk, x, u, &m), central_difference(|u| (mc.f0)(tk, x, u, &m), u)),
            ("g0_x", (mc.g0_x)(x, &m), central_difference(|x| (mc.g0)(x, &m), x)),
            ("f1_x", (nc.f1_x)(tk, x, u, x0), central_difference(|x| (nc.f1)(tk, x, u, x0), x)),
            ("f1_u", (nc.f1_u)(tk, x, u, x0), central_difference(|u| (nc.f1)(tk, x, u, x0), u)),
            ("f2_x", (nc.f2_x)(tk, x, &m, x0), central_difference(|x| (nc.f2)(tk, x, &m, x0), x)),
            ("g_x", (nc.g_x)(x, &m, x0), central_difference(|x| (nc.g)(x, &m, x0), x)),
        ];
        for (name, analytic, numeric) in pairs {
            let analytic = finite("derivative", analytic, || format!("{name} at t={tk}, x={x}, u={u}, x0={x0}"))?;
            let rel = (analytic - numeric).abs() / (1.0 + analytic.abs());
            t.record(rel, 0.0, || format!("{name} at t={tk}, x={x}, u={u}, x0={x0}: {analytic} vs {numeric}"));
        }
    }
    checks.push(t.finish());

    Ok(ValidationReport { checks })
}

/// Empirical weak-monotonicity pairings `E[(f2_x(t, xi', L(xi'), x0) - f2_x(t, xi, L(xi), x0))(xi' - xi)]`
/// and the same for `g_x`, with `xi`, `xi'` index-paired.
pub fn monotonicity_pairing(spec: &ModelSpec, t: f64, x0: f64, xi: &[f64], xi_p: &[f64]) -> Result<(f64, f64)> {
    if xi.len() != xi_p.len() {
        return Err(MfgError::SizeMismatch { left: xi.len(), right: xi_p.len() });
    }
    let nc = &spec.minor_cost;
    let (s, sp) = (spec.summarize(t, xi), spec.summarize(t, xi_p));
    let n = xi.len() as f64;
    let mut vf = 0.0;
    let mut vg = 0.0;
    for (&a, &b) in xi.iter().zip(xi_p) {
        let tup = || format!("t={t}, x0={x0}, pair=({a}, {b})");
        let df = finite("f2_x", (nc.f2_x)(t, b, &sp.moments, x0), tup)? - finite("f2_x", (nc.f2_x)(t, a, &s.moments, x0), tup)?;
        let dg = finite("g_x", (nc.g_x)(b, &sp.moments, x0), tup)? - finite("g_x", (nc.g_x)(a, &s.moments, x0), tup)?;
        vf += df * (b - a);
        vg += dg * (b - a);
    }
    Ok((vf / n, vg / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn lq() -> ModelSpec {
        catalog::lq_weak_coupling()
    }

    #[test]
    fn lq_instance_passes_all_checks() {
        let report = validate_assumptions(&lq(), 300, 1e-9).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn concave_control_cost_fails_convexity() {
        let mut spec = lq();
        spec.minor_cost.f1 = Arc::new(|_, _, u, _| -u * u);
        spec.minor_cost.f1_x = Arc::new(|_, _, _, _| 0.0);
        spec.minor_cost.f1_u = Arc::new(|_, _, u, _| -2.0 * u);
        spec.constants.minor_convexity = 1.0;
        let report = validate_assumptions(&spec, 50, 1e-9).unwrap();
        assert!(!report.check("minor_convexity").unwrap().passed);
    }

    #[test]
    fn decreasing_measure_derivative_fails_monotonicity() {
        let mut spec = lq();
        spec.minor_cost.f2 = Arc::new(|_, x, _, _| -0.5 * x * x);
        spec.minor_cost.f2_x = Arc::new(|_, x, _, _| -x);
        // two-point hand check: xi = {0, 1}, xi' = {1, 3}; E[(-xi' + xi)(xi' - xi)] = -(1 + 4) / 2
        let (vf, _) = monotonicity_pairing(&spec, 0.0, 0.0, &[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert_eq!(vf, -2.5);
        let report = validate_assumptions(&spec, 50, 1e-9).unwrap();
        assert!(!report.check("weak_monotonicity").unwrap().passed);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let mut spec = lq();
        spec.major_cost.f0 = Arc::new(|_, x, _, _| if x > 0.0 { f64::NAN } else { 0.0 });
        let err = validate_assumptions(&spec, 50, 1e-9).unwrap_err();
        assert!(matches!(err, MfgError::ModelEvaluation { function: "f0", .. }), "{err}");
    }

    #[test]
    fn bad_arguments() {
        assert!(validate_assumptions(&lq(), 0, 1e-3).is_err());
        assert!(validate_assumptions(&lq(), 10, 0.0).is_err());
    }

    #[test]
    fn budget_examples() {
        let mut spec = lq();
        let c = &mut spec.constants;
        c.minor_measure_lip = 0.0;
        c.major_state_lip = 0.0;
        assert_eq!(coupling_budget(&spec), 0.0);
        let c = &mut spec.constants;
        c.minor_measure_lip = 0.1;
        c.minor_convexity = 1.0;
        c.major_state_lip = 0.2;
        c.major_measure_lip = 0.3;
        assert!((coupling_budget(&spec) - 0.1).abs() < 1e-15);
        let c = &mut spec.constants;
        c.minor_measure_lip = 1.0;
        c.minor_convexity = 0.5;
        c.major_state_lip = 0.0;
        c.major_measure_lip = 0.0;
        assert_eq!(coupling_budget(&spec), 2.0);
    }

    #[test]
    fn summary_is_the_empirical_average() {
        let spec = lq();
        let ys = [0.5, -1.0, 2.0, 3.5];
        let s = spec.summarize(0.3, &ys);
        for (i, c) in spec.coeffs.iter().enumerate() {
            let direct = ys.iter().map(|&y| (c.intercept_kernel)(0.3, y)).sum::<f64>() / 4.0;
            assert_eq!(s.intercepts[i], direct);
        }
        assert_eq!(s.mean, 1.25);
    }

    #[test]
    fn numeric_derivatives_match_analytic() {
        let spec = lq();
        let numeric = MinorCostSpec::with_numeric_derivatives(
            spec.minor_cost.f1.clone(),
            spec.minor_cost.f2.clone(),
            spec.minor_cost.g.clone(),
        );
        let m = [0.7];
        let a = (spec.minor_cost.f1_u)(0.1, 0.4, -1.3, 0.2);
        let b = (numeric.f1_u)(0.1, 0.4, -1.3, 0.2);
        assert!((a - b).abs() < 1e-7);
        let a = (spec.minor_cost.g_x)(2.0, &m, 0.2);
        let b = (numeric.g_x)(2.0, &m, 0.2);
        assert!((a - b).abs() < 1e-7);
    }
}

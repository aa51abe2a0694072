//! Built-in model instances and the TOML model-file format.
//!
//! The concrete instances here are our own choices; none of them is taken
//! from an external source. See `docs/model_files.md` for the file format.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::lq_oracle::{LQSpec, MajorLQ, MinorLQ};
use crate::model::{Constants, Kernel, LinearCoefficient, MajorCostSpec, MinorCostSpec, ModelSpec, TimeFn};
use crate::stochastics::InitialLaw;

/// `ln cosh x`, stable for large `|x|`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Quadratic costs with optional `ln cosh` perturbations, shared by the LQ
/// mapping and the model files.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MajorQuadratic {
    #[serde(default)]
    pub state: f64,
    pub control: f64,
    #[serde(default)]
    pub mean_coupling: f64,
    #[serde(default)]
    pub terminal: f64,
    #[serde(default)]
    pub perturb_state: f64,
    #[serde(default)]
    pub perturb_control: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinorQuadratic {
    #[serde(default)]
    pub state: f64,
    pub control: f64,
    #[serde(default)]
    pub major_coupling: f64,
    #[serde(default)]
    pub mean_coupling: f64,
    #[serde(default)]
    pub terminal: f64,
    #[serde(default)]
    pub perturb_state: f64,
    #[serde(default)]
    pub perturb_control: f64,
}

fn mean_of(m: &[f64]) -> f64 {
    m[0]
}

#[inline]
fn scaled_tanh(d: f64, x: f64) -> f64 {
    if d == 0.0 { 0.0 } else { d * x.tanh() }
}

#[inline]
fn scaled_log_cosh(d: f64, x: f64) -> f64 {
    if d == 0.0 { 0.0 } else { d * log_cosh(x) }
}

/// `f0 = (Q x^2 + R u^2)/2 + r x mbar + du lncosh u + dx lncosh x`, `g0 = G x^2 / 2`.
pub fn major_quadratic_cost(c: MajorQuadratic) -> MajorCostSpec {
    let MajorQuadratic { state: q, control: r, mean_coupling: rc, terminal: g, perturb_state: dx, perturb_control: du } = c;
    MajorCostSpec {
        f0: Arc::new(move |_, x, u, m| 0.5 * (q * x * x + r * u * u) + rc * x * mean_of(m) + scaled_log_cosh(du, u) + scaled_log_cosh(dx, x)),
        f0_x: Arc::new(move |_, x, _, m| q * x + rc * mean_of(m) + scaled_tanh(dx, x)),
        f0_u: Arc::new(move |_, _, u, _| r * u + scaled_tanh(du, u)),
        g0: Arc::new(move |x, _| 0.5 * g * x * x),
        g0_x: Arc::new(move |x, _| g * x),
        control_curvature: (du == 0.0).then_some(r),
    }
}

/// `f1 = (Q x^2 + R u^2)/2 + rho x x0 + du lncosh u + dx lncosh x`,
/// `f2 = r x mbar`, `g = G x^2 / 2`.
pub fn minor_quadratic_cost(c: MinorQuadratic) -> MinorCostSpec {
    let MinorQuadratic {
        state: q,
        control: r,
        major_coupling: rho,
        mean_coupling: rm,
        terminal: g,
        perturb_state: dx,
        perturb_control: du,
    } = c;
    MinorCostSpec {
        f1: Arc::new(move |_, x, u, x0| 0.5 * (q * x * x + r * u * u) + rho * x * x0 + scaled_log_cosh(du, u) + scaled_log_cosh(dx, x)),
        f1_x: Arc::new(move |_, x, _, x0| q * x + rho * x0 + scaled_tanh(dx, x)),
        f1_u: Arc::new(move |_, _, u, _| r * u + scaled_tanh(du, u)),
        f2: Arc::new(move |_, x, m, _| rm * x * mean_of(m)),
        f2_x: Arc::new(move |_, _, m, _| rm * mean_of(m)),
        g: Arc::new(move |x, _, _| 0.5 * g * x * x),
        g_x: Arc::new(move |x, _, _| g * x),
        control_curvature: (du == 0.0).then_some(r),
    }
}

fn identity_kernel() -> Kernel {
    Arc::new(|_, y| y)
}

/// Maps an LQ specification onto a [`ModelSpec`], with constants
/// `C_f = R/2`, `C_f0 = R0/2`, `L_m = |e|`, `l_m = max(|e0|, |r0|)`,
/// `l_x0 = |rho|` and `L` the largest coefficient magnitude (at least
/// `max(1, 2/R, 2/R0)`).
pub fn lq_model(name: &str, lq: LQSpec, horizon: f64, init_major: InitialLaw, init_minor: InitialLaw) -> Result<ModelSpec> {
    lq.validate()?;
    let LQSpec { major: m, minor: n, .. } = lq;
    let lq = LQSpec { init_means: (init_major.mean(), init_minor.mean()), ..lq };
    let coeffs = [
        LinearCoefficient::affine(0.0, m.e, m.a, m.c),
        LinearCoefficient::constant(m.s, 0.0, 0.0),
        LinearCoefficient::affine(0.0, n.e, n.a, n.c),
        LinearCoefficient::constant(n.sigma, 0.0, 0.0),
        LinearCoefficient::constant(n.sigma_tilde, 0.0, 0.0),
    ];
    let major_cost = major_quadratic_cost(MajorQuadratic {
        state: m.q,
        control: m.r,
        mean_coupling: m.coupling,
        terminal: m.g,
        ..Default::default()
    });
    let minor_cost = minor_quadratic_cost(MinorQuadratic {
        state: n.q,
        control: n.r,
        major_coupling: n.major_coupling,
        mean_coupling: n.mean_coupling,
        terminal: n.g,
        ..Default::default()
    });
    let big_l = [
        1.0,
        2.0 / m.r,
        2.0 / n.r,
        m.a.abs(),
        m.c.abs(),
        m.e.abs(),
        m.q,
        m.r,
        m.coupling.abs(),
        m.g,
        n.a.abs(),
        n.c.abs(),
        n.e.abs(),
        n.q,
        n.r,
        n.major_coupling.abs(),
        n.mean_coupling.abs(),
        n.g,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let constants = Constants {
        big_l,
        minor_measure_lip: n.e.abs(),
        major_measure_lip: m.e.abs().max(m.coupling.abs()),
        major_state_lip: n.major_coupling.abs(),
        major_convexity: m.r / 2.0,
        minor_convexity: n.r / 2.0,
    };
    Ok(ModelSpec {
        name: name.to_string(),
        coeffs,
        major_cost,
        minor_cost,
        measure_moments: vec![identity_kernel()],
        constants,
        horizon,
        init_major,
        init_minor,
        lq: Some(lq),
    })
}

/// Instance A: weak own-control loops and small terminal weights, so that
/// the mean-field couplings dominate the fixed-point maps.
pub fn lq_weak_coupling_spec() -> LQSpec {
    LQSpec {
        major: MajorLQ { a: 0.0, c: 0.3, e: 0.3, s: 0.4, q: 0.0, r: 2.0, coupling: 0.3, g: 0.1 },
        minor: MinorLQ {
            a: 0.0,
            c: 0.3,
            e: 0.1,
            sigma: 0.4,
            sigma_tilde: 0.3,
            q: 0.0,
            r: 2.0,
            major_coupling: 0.3,
            mean_coupling: 0.05,
            g: 0.1,
        },
        init_means: (0.0, 0.0),
    }
}

pub fn lq_weak_coupling() -> ModelSpec {
    lq_model(
        "lq-a",
        lq_weak_coupling_spec(),
        1.0,
        InitialLaw::PointMass { mean: 1.0 },
        InitialLaw::Gaussian { mean: 0.5, std: 0.5 },
    )
    .expect("valid catalog instance")
}

/// Instance B: mean reversion, running state costs, nonzero common noise.
pub fn lq_mean_reverting() -> ModelSpec {
    let lq = LQSpec {
        major: MajorLQ { a: -0.2, c: 0.5, e: 0.2, s: 0.3, q: 0.5, r: 1.0, coupling: 0.2, g: 1.0 },
        minor: MinorLQ {
            a: 0.1,
            c: 0.5,
            e: 0.05,
            sigma: 0.5,
            sigma_tilde: 0.3,
            q: 0.5,
            r: 1.0,
            major_coupling: 0.3,
            mean_coupling: 0.2,
            g: 1.0,
        },
        init_means: (0.0, 0.0),
    };
    lq_model(
        "lq-b",
        lq,
        1.0,
        InitialLaw::Gaussian { mean: 0.5, std: 0.3 },
        InitialLaw::Uniform { mean: -0.5, std: 0.6 },
    )
    .expect("valid catalog instance")
}

/// Instance C: strong own control, weaker cross terms.
pub fn lq_strong_control() -> ModelSpec {
    let lq = LQSpec {
        major: MajorLQ { a: 0.1, c: 1.0, e: 0.1, s: 0.5, q: 1.0, r: 2.0, coupling: 0.25, g: 0.5 },
        minor: MinorLQ {
            a: -0.1,
            c: 1.0,
            e: 0.08,
            sigma: 0.4,
            sigma_tilde: 0.2,
            q: 1.0,
            r: 2.0,
            major_coupling: 0.35,
            mean_coupling: 0.1,
            g: 0.5,
        },
        init_means: (0.0, 0.0),
    };
    lq_model(
        "lq-c",
        lq,
        1.0,
        InitialLaw::Uniform { mean: 1.0, std: 0.5 },
        InitialLaw::Gaussian { mean: 1.0, std: 0.3 },
    )
    .expect("valid catalog instance")
}

/// The three LQ instances inside the certified coupling regime.
pub fn lq_catalog() -> Vec<ModelSpec> {
    vec![lq_weak_coupling(), lq_mean_reverting(), lq_strong_control()]
}

/// Instance A with all measure and cross couplings removed.
pub fn lq_decoupled() -> ModelSpec {
    let mut lq = lq_weak_coupling_spec().scale_coupling(0.0);
    lq.minor.mean_coupling = 0.0;
    lq_model(
        "lq-decoupled",
        lq,
        1.0,
        InitialLaw::PointMass { mean: 1.0 },
        InitialLaw::Gaussian { mean: 0.5, std: 0.5 },
    )
    .expect("valid catalog instance")
}

/// All costs zero, `b0 = u0`, `b = u`, unit noises.
pub fn zero_cost() -> ModelSpec {
    let lq = LQSpec {
        major: MajorLQ { a: 0.0, c: 1.0, e: 0.0, s: 1.0, q: 0.0, r: 1.0, coupling: 0.0, g: 0.0 },
        minor: MinorLQ {
            a: 0.0,
            c: 1.0,
            e: 0.0,
            sigma: 1.0,
            sigma_tilde: 1.0,
            q: 0.0,
            r: 1.0,
            major_coupling: 0.0,
            mean_coupling: 0.0,
            g: 0.0,
        },
        init_means: (0.0, 0.0),
    };
    let mut spec = lq_model("zero-cost", lq, 1.0, InitialLaw::PointMass { mean: 0.0 }, InitialLaw::PointMass { mean: 0.0 })
        .expect("valid catalog instance");
    spec.major_cost.f0 = Arc::new(|_, _, _, _| 0.0);
    spec.major_cost.f0_u = Arc::new(|_, _, _, _| 0.0);
    spec.major_cost.control_curvature = Some(0.0);
    spec.minor_cost.f1 = Arc::new(|_, _, _, _| 0.0);
    spec.minor_cost.f1_u = Arc::new(|_, _, _, _| 0.0);
    spec.minor_cost.control_curvature = Some(0.0);
    spec
}

/// `f = u^2 / 2`, no state or terminal costs, `b0 = u0`, `b = u` and unit
/// noises: every adjoint vanishes and the controls are zero.
pub fn free_motion() -> ModelSpec {
    let lq = LQSpec {
        major: MajorLQ { a: 0.0, c: 1.0, e: 0.0, s: 1.0, q: 0.0, r: 1.0, coupling: 0.0, g: 0.0 },
        minor: MinorLQ {
            a: 0.0,
            c: 1.0,
            e: 0.0,
            sigma: 1.0,
            sigma_tilde: 1.0,
            q: 0.0,
            r: 1.0,
            major_coupling: 0.0,
            mean_coupling: 0.0,
            g: 0.0,
        },
        init_means: (0.0, 0.0),
    };
    lq_model(
        "free-motion",
        lq,
        1.0,
        InitialLaw::Gaussian { mean: 0.0, std: 1.0 },
        InitialLaw::Gaussian { mean: 0.0, std: 1.0 },
    )
    .expect("valid catalog instance")
}

/// Catalog instance by name.
pub fn by_name(name: &str) -> Option<ModelSpec> {
    match name {
        "lq-a" => Some(lq_weak_coupling()),
        "lq-b" => Some(lq_mean_reverting()),
        "lq-c" => Some(lq_strong_control()),
        "lq-decoupled" => Some(lq_decoupled()),
        "free-motion" => Some(free_motion()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFnDecl {
    Value(f64),
    Kind(TimeFnKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFnKind {
    Constant { value: f64 },
    /// Piecewise linear through `(times[i], values[i])`, flat outside.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl Default for TimeFnDecl {
    fn default() -> Self {
        TimeFnDecl::Value(0.0)
    }
}

impl TimeFnDecl {
    fn constant_value(&self) -> Option<f64> {
        match self {
            TimeFnDecl::Value(v) | TimeFnDecl::Kind(TimeFnKind::Constant { value: v }) => Some(*v),
            TimeFnDecl::Kind(TimeFnKind::Tabulated { .. }) => None,
        }
    }

    fn max_abs(&self) -> f64 {
        match self {
            TimeFnDecl::Value(v) | TimeFnDecl::Kind(TimeFnKind::Constant { value: v }) => v.abs(),
            TimeFnDecl::Kind(TimeFnKind::Tabulated { values, .. }) => values.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }

    fn build(&self, what: &str) -> Result<TimeFn> {
        match self.clone() {
            TimeFnDecl::Value(v) | TimeFnDecl::Kind(TimeFnKind::Constant { value: v }) => Ok(Arc::new(move |_| v)),
            TimeFnDecl::Kind(TimeFnKind::Tabulated { times, values }) => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(MfgError::Config(format!("{what}: tabulated times and values must be non-empty and equal length")));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(MfgError::Config(format!("{what}: tabulated times must be strictly increasing")));
                }
                Ok(Arc::new(move |t| {
                    let i = times.partition_point(|&s| s <= t);
                    if i == 0 {
                        values[0]
                    } else if i == times.len() {
                        values[i - 1]
                    } else {
                        let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
                        values[i - 1] + w * (values[i] - values[i - 1])
                    }
                }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InterceptDecl {
    Value(f64),
    Kind(InterceptKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterceptKind {
    Constant { value: f64 },
    /// Kernel `constant + slope_y * y`.
    Affine {
        #[serde(default)]
        constant: f64,
        slope_y: f64,
    },
}

impl Default for InterceptDecl {
    fn default() -> Self {
        InterceptDecl::Value(0.0)
    }
}

impl InterceptDecl {
    /// `(constant, slope_y)`
    fn parts(&self) -> (f64, f64) {
        match *self {
            InterceptDecl::Value(v) | InterceptDecl::Kind(InterceptKind::Constant { value: v }) => (v, 0.0),
            InterceptDecl::Kind(InterceptKind::Affine { constant, slope_y }) => (constant, slope_y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientDecl {
    #[serde(default)]
    pub intercept: InterceptDecl,
    #[serde(default)]
    pub slope_x: TimeFnDecl,
    #[serde(default)]
    pub slope_u: TimeFnDecl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MajorCostDecl {
    Quadratic(MajorQuadratic),
    QuadraticPerturbed(MajorQuadratic),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MinorCostDecl {
    Quadratic(MinorQuadratic),
    QuadraticPerturbed(MinorQuadratic),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitDecl {
    pub major: InitialLaw,
    pub minor: InitialLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsDecl {
    pub major: MajorCostDecl,
    pub minor: MinorCostDecl,
}

/// Optional overrides of derived constants.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsDecl {
    pub big_l: Option<f64>,
    pub minor_measure_lip: Option<f64>,
    pub major_measure_lip: Option<f64>,
    pub major_state_lip: Option<f64>,
    pub major_convexity: Option<f64>,
    pub minor_convexity: Option<f64>,
}

/// Parsed model file. Either `lq` or both `coefficients` and `costs` must
/// be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub init: InitDecl,
    pub lq: Option<LQDecl>,
    pub coefficients: Option<BTreeMap<String, CoefficientDecl>>,
    pub costs: Option<CostsDecl>,
    #[serde(default)]
    pub constants: ConstantsDecl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LQDecl {
    pub major: MajorLQ,
    pub minor: MinorLQ,
}

fn default_name() -> String {
    "model".into()
}

fn default_horizon() -> f64 {
    1.0
}

const COEF_NAMES: [&str; 5] = ["b0", "sigma0", "b", "sigma", "sigma_tilde"];

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MfgError::Config(format!("model file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MfgError::Config(format!("cannot read model file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn build(&self) -> Result<ModelSpec> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(MfgError::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        self.init.major.validate().map_err(|e| MfgError::Config(e.to_string()))?;
        self.init.minor.validate().map_err(|e| MfgError::Config(e.to_string()))?;
        let mut spec = match (&self.lq, &self.coefficients, &self.costs) {
            (Some(lq), None, None) => {
                let lq = LQSpec { major: lq.major, minor: lq.minor, init_means: (0.0, 0.0) };
                lq_model(&self.name, lq, self.horizon, self.init.major, self.init.minor)?
            }
            (None, Some(coefs), Some(costs)) => self.build_general(coefs, costs)?,
            _ => {
                return Err(MfgError::Config(
                    "model file needs either an [lq] section or [coefficients.*] plus [costs.*]".into(),
                ))
            }
        };
        let o = self.constants;
        let c = &mut spec.constants;
        c.big_l = o.big_l.unwrap_or(c.big_l);
        c.minor_measure_lip = o.minor_measure_lip.unwrap_or(c.minor_measure_lip);
        c.major_measure_lip = o.major_measure_lip.unwrap_or(c.major_measure_lip);
        c.major_state_lip = o.major_state_lip.unwrap_or(c.major_state_lip);
        c.major_convexity = o.major_convexity.unwrap_or(c.major_convexity);
        c.minor_convexity = o.minor_convexity.unwrap_or(c.minor_convexity);
        Ok(spec)
    }

    fn build_general(&self, coefs: &BTreeMap<String, CoefficientDecl>, costs: &CostsDecl) -> Result<ModelSpec> {
        if let Some(bad) = coefs.keys().find(|k| !COEF_NAMES.contains(&k.as_str())) {
            return Err(MfgError::Config(format!("unknown coefficient `{bad}` (expected one of {COEF_NAMES:?})")));
        }
        let decl: Vec<CoefficientDecl> =
            COEF_NAMES.iter().map(|n| coefs.get(*n).cloned().unwrap_or_default()).collect();
        let mut built = Vec::with_capacity(5);
        for (name, d) in COEF_NAMES.iter().zip(&decl) {
            let (c0, sy) = d.intercept.parts();
            let kernel: Kernel = Arc::new(move |_, y| c0 + sy * y);
            built.push(LinearCoefficient::new(
                kernel,
                d.slope_x.build(&format!("{name}.slope_x"))?,
                d.slope_u.build(&format!("{name}.slope_u"))?,
            ));
        }
        let coeffs: [LinearCoefficient; 5] = built.try_into().map_err(|_| MfgError::Config("coefficients".into()))?;
        let (mq, mq_perturbed) = match costs.major {
            MajorCostDecl::Quadratic(q) => (q, false),
            MajorCostDecl::QuadraticPerturbed(q) => (q, true),
        };
        let (nq, nq_perturbed) = match costs.minor {
            MinorCostDecl::Quadratic(q) => (q, false),
            MinorCostDecl::QuadraticPerturbed(q) => (q, true),
        };
        if !mq_perturbed && (mq.perturb_state != 0.0 || mq.perturb_control != 0.0) {
            return Err(MfgError::Config("major cost: perturbations require kind = \"quadratic_perturbed\"".into()));
        }
        if !nq_perturbed && (nq.perturb_state != 0.0 || nq.perturb_control != 0.0) {
            return Err(MfgError::Config("minor cost: perturbations require kind = \"quadratic_perturbed\"".into()));
        }

        let slope_y = |i: usize| decl[i].intercept.parts().1.abs();
        let max_slope = decl.iter().map(|d| d.slope_x.max_abs().max(d.slope_u.max_abs())).fold(0.0, f64::max);
        let c_f0 = mq.control / 2.0;
        let c_f = nq.control / 2.0;
        let mut big_l = [
            1.0,
            max_slope,
            mq.state.abs() + mq.perturb_state.abs(),
            mq.control.abs() + mq.perturb_control.abs(),
            mq.mean_coupling.abs(),
            mq.terminal.abs(),
            nq.state.abs() + nq.perturb_state.abs(),
            nq.control.abs() + nq.perturb_control.abs(),
            nq.major_coupling.abs(),
            nq.mean_coupling.abs(),
            nq.terminal.abs(),
        ]
        .into_iter()
        .chain((0..5).map(slope_y))
        .fold(0.0, f64::max);
        if c_f0 > 0.0 && c_f > 0.0 {
            big_l = big_l.max(1.0 / c_f0).max(1.0 / c_f);
        }
        let constants = Constants {
            big_l,
            minor_measure_lip: slope_y(2).max(slope_y(3)).max(slope_y(4)),
            major_measure_lip: slope_y(0).max(slope_y(1)).max(mq.mean_coupling.abs()),
            major_state_lip: nq.major_coupling.abs(),
            major_convexity: c_f0,
            minor_convexity: c_f,
        };

        // LQ-shaped declarations also get the oracle.
        let cv = |d: &CoefficientDecl, f: fn(&CoefficientDecl) -> &TimeFnDecl| f(d).constant_value();
        let consts: Option<Vec<(f64, f64)>> =
            decl.iter().map(|d| Some((cv(d, |d| &d.slope_x)?, cv(d, |d| &d.slope_u)?))).collect();
        let lq = match consts {
            Some(s)
                if !mq_perturbed
                    && !nq_perturbed
                    && decl[0].intercept.parts().0 == 0.0
                    && decl[2].intercept.parts().0 == 0.0
                    && (1..5).all(|i| i == 2 || (s[i] == (0.0, 0.0) && slope_y(i) == 0.0)) =>
            {
                let lq = LQSpec {
                    major: MajorLQ {
                        a: s[0].0,
                        c: s[0].1,
                        e: decl[0].intercept.parts().1,
                        s: decl[1].intercept.parts().0,
                        q: mq.state,
                        r: mq.control,
                        coupling: mq.mean_coupling,
                        g: mq.terminal,
                    },
                    minor: MinorLQ {
                        a: s[2].0,
                        c: s[2].1,
                        e: decl[2].intercept.parts().1,
                        sigma: decl[3].intercept.parts().0,
                        sigma_tilde: decl[4].intercept.parts().0,
                        q: nq.state,
                        r: nq.control,
                        major_coupling: nq.major_coupling,
                        mean_coupling: nq.mean_coupling,
                        g: nq.terminal,
                    },
                    init_means: (self.init.major.mean(), self.init.minor.mean()),
                };
                lq.validate().ok().map(|_| lq)
            }
            _ => None,
        };

        Ok(ModelSpec {
            name: self.name.clone(),
            coeffs,
            major_cost: major_quadratic_cost(mq),
            minor_cost: minor_quadratic_cost(nq),
            measure_moments: vec![identity_kernel()],
            constants,
            horizon: self.horizon,
            init_major: self.init.major,
            init_minor: self.init.minor,
            lq,
        })
    }
}

/// Loads a model file from disk.
pub fn load_model(path: &Path) -> Result<ModelSpec> {
    ModelFile::load(path)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{coupling_budget, validate_assumptions};

    #[test]
    fn catalog_is_certified() {
        for spec in lq_catalog() {
            assert!(coupling_budget(&spec) <= 0.1 + 1e-12, "{}", spec.name);
            let report = validate_assumptions(&spec, 200, 1e-9).unwrap();
            assert!(report.passed(), "{}\n{report}", spec.name);
        }
    }

    #[test]
    fn log_cosh_is_stable() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert!((log_cosh(1.0) - 1.0f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    const GENERAL: &str = r#"
name = "file-lq"
horizon = 1.0
[init.major]
family = "point_mass"
mean = 1.0
[init.minor]
family = "gaussian"
mean = 0.5
std = 0.5
[coefficients.b0]
intercept = { kind = "affine", slope_y = 0.3 }
slope_u = 0.3
[coefficients.sigma0]
intercept = 0.4
[coefficients.b]
intercept = { kind = "affine", slope_y = 0.1 }
slope_u = 0.3
[coefficients.sigma]
intercept = 0.4
[coefficients.sigma_tilde]
intercept = 0.3
[costs.major]
kind = "quadratic"
control = 2.0
mean_coupling = 0.3
terminal = 0.1
[costs.minor]
kind = "quadratic"
control = 2.0
major_coupling = 0.3
mean_coupling = 0.05
terminal = 0.1
"#;

    #[test]
    fn general_file_recognises_lq_shape() {
        let spec = ModelFile::parse(GENERAL).unwrap().build().unwrap();
        let lq = spec.lq.expect("lq-shaped");
        let mut want = lq_weak_coupling_spec();
        want.init_means = (1.0, 0.5);
        assert_eq!(lq, want);
        assert_eq!(spec.constants, lq_weak_coupling().constants);
    }

    #[test]
    fn tabulated_and_perturbed_file() {
        let text = GENERAL
            .replace("slope_u = 0.3\n[coefficients.sigma0]", "slope_u = 0.3\nslope_x = { kind = \"tabulated\", times = [0.0, 1.0], values = [0.0, -0.5] }\n[coefficients.sigma0]")
            .replace("kind = \"quadratic\"\ncontrol = 2.0\nmajor", "kind = \"quadratic_perturbed\"\nperturb_control = 0.5\ncontrol = 2.0\nmajor");
        let spec = ModelFile::parse(&text).unwrap().build().unwrap();
        assert!(spec.lq.is_none());
        assert!(((spec.coeffs[0].slope_x)(0.5) + 0.25).abs() < 1e-15);
        assert_eq!(spec.minor_cost.control_curvature, None);
        assert!(validate_assumptions(&spec, 100, 1e-6).unwrap().passed());
    }

    #[test]
    fn file_errors() {
        assert!(ModelFile::parse("horizon = 1.0").is_err());
        let bad = GENERAL.replace("[coefficients.sigma0]", "[coefficients.nope]");
        assert!(ModelFile::parse(&bad).unwrap().build().is_err());
        let both = format!("{GENERAL}\n[lq.major]\na=0.0\n");
        assert!(ModelFile::parse(&both).is_err() || ModelFile::parse(&both).unwrap().build().is_err());
    }
}

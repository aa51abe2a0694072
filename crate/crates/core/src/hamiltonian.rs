//! Generalized Hamiltonians and their minimizing controls.
//!
//! Measure arguments are passed as a precomputed [`MeasureSummary`], which is
//! how the kernel averages are cached per (time, ensemble).

use crate::error::{MfgError, Result};
use crate::model::{Coef, MeasureSummary, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MajorAdjoint {
    pub p0: f64,
    pub q0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MinorAdjoint {
    pub p: f64,
    pub q: f64,
    pub q_tilde: f64,
}

const MAX_ITER: usize = 100;
const MAX_BRACKET_DOUBLINGS: usize = 200;

fn finite(v: f64, function: &'static str, tuple: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MfgError::ModelEvaluation { function, tuple: tuple() })
    }
}

/// `H0 = b0 p0 + sigma0 q0 + f0`.
pub fn hamiltonian_major(t: f64, x0: f64, adj: MajorAdjoint, u0: f64, m: &MeasureSummary, spec: &ModelSpec) -> Result<f64> {
    let h = spec.eval_coef(Coef::MajorDrift, t, x0, u0, m) * adj.p0
        + spec.eval_coef(Coef::MajorVol, t, x0, u0, m) * adj.q0
        + (spec.major_cost.f0)(t, x0, u0, &m.moments);
    finite(h, "H0", || format!("t={t}, x0={x0}, u0={u0}, adj={adj:?}"))
}

/// `H = b p + sigma q + sigma~ q~ + f1 + f2`.
pub fn hamiltonian_minor(
    t: f64,
    x: f64,
    adj: MinorAdjoint,
    u: f64,
    x0: f64,
    m: &MeasureSummary,
    spec: &ModelSpec,
) -> Result<f64> {
    let h = spec.eval_coef(Coef::MinorDrift, t, x, u, m) * adj.p
        + spec.eval_coef(Coef::MinorVol, t, x, u, m) * adj.q
        + spec.eval_coef(Coef::MinorCommonVol, t, x, u, m) * adj.q_tilde
        + spec.minor_cost.f(t, x, u, &m.moments, x0);
    finite(h, "H", || format!("t={t}, x={x}, u={u}, x0={x0}, adj={adj:?}"))
}

/// Control-dependent part of `H0`: `(b0_u p0 + sigma0_u q0) u0 + f0(t, x0, u0, m)`.
pub fn major_control_slope(t: f64, adj: MajorAdjoint, spec: &ModelSpec) -> f64 {
    spec.slope_u(Coef::MajorDrift, t) * adj.p0 + spec.slope_u(Coef::MajorVol, t) * adj.q0
}

pub fn minor_control_slope(t: f64, adj: MinorAdjoint, spec: &ModelSpec) -> f64 {
    spec.slope_u(Coef::MinorDrift, t) * adj.p
        + spec.slope_u(Coef::MinorVol, t) * adj.q
        + spec.slope_u(Coef::MinorCommonVol, t) * adj.q_tilde
}

fn tolerance(u: f64) -> f64 {
    1e-10 * (1.0 + u.abs())
}

/// Root of the increasing map `u -> slope + cost_u(u)`.
fn solve_first_order<F: Fn(f64) -> f64>(slope: f64, cost_u: F, curvature: Option<f64>) -> Result<f64> {
    let g = |u: f64| slope + cost_u(u);
    let g0 = g(0.0);
    if !g0.is_finite() {
        return Err(MfgError::MinimizerNotFound { residual: g0, iterations: 0 });
    }
    if g0.abs() <= tolerance(0.0) {
        return Ok(0.0);
    }
    if let Some(r) = curvature {
        if r > 0.0 {
            return Ok(-g0 / r);
        }
        return Err(MfgError::MinimizerNotFound { residual: g0, iterations: 0 });
    }

    // Bracket grown geometrically from 0.
    let dir = if g0 > 0.0 { -1.0 } else { 1.0 };
    let mut near = 0.0;
    let mut far = dir;
    let mut g_far = g(far);
    let mut n = 0;
    while g_far.is_finite() && g_far.signum() == g0.signum() {
        n += 1;
        if n > MAX_BRACKET_DOUBLINGS {
            return Err(MfgError::MinimizerNotFound { residual: g_far, iterations: n });
        }
        near = far;
        far *= 2.0;
        g_far = g(far);
    }
    if !g_far.is_finite() {
        return Err(MfgError::MinimizerNotFound { residual: g_far, iterations: n });
    }
    if g_far.abs() <= tolerance(far) {
        return Ok(far);
    }
    let (mut lo, mut hi) = if dir > 0.0 { (near, far) } else { (far, near) };

    // Safeguarded Newton with a numerical slope of cost_u.
    let mut u = 0.5 * (lo + hi);
    let mut last = f64::NAN;
    for it in 0..MAX_ITER {
        let gu = g(u);
        if !gu.is_finite() {
            return Err(MfgError::MinimizerNotFound { residual: gu, iterations: it });
        }
        last = gu;
        if gu.abs() <= tolerance(u) {
            return Ok(u);
        }
        if gu < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let h = 1e-6 * (1.0 + u.abs());
        let d = (g(u + h) - g(u - h)) / (2.0 * h);
        let newton = u - gu / d;
        u = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * (1.0 + u.abs()) {
            return Ok(u);
        }
    }
    Err(MfgError::MinimizerNotFound { residual: last, iterations: MAX_ITER })
}

/// `argmin_u0 H0(t, x0, adj, u0, m)`.
pub fn minimize_major(t: f64, x0: f64, adj: MajorAdjoint, m: &MeasureSummary, spec: &ModelSpec) -> Result<f64> {
    minimize_major_with_slope(t, x0, major_control_slope(t, adj, spec), m, spec)
}

/// [`minimize_major`] with the control slope of the coefficients already
/// contracted against the adjoints.
pub fn minimize_major_with_slope(t: f64, x0: f64, slope: f64, m: &MeasureSummary, spec: &ModelSpec) -> Result<f64> {
    let fu = &spec.major_cost.f0_u;
    solve_first_order(slope, |u| fu(t, x0, u, &m.moments), spec.major_cost.control_curvature)
}

/// `argmin_u H(t, x, adj, u, x0, .)`; the measure does not enter.
pub fn minimize_minor(t: f64, x: f64, adj: MinorAdjoint, x0: f64, spec: &ModelSpec) -> Result<f64> {
    minimize_minor_with_slope(t, x, minor_control_slope(t, adj, spec), x0, spec)
}

pub fn minimize_minor_with_slope(t: f64, x: f64, slope: f64, x0: f64, spec: &ModelSpec) -> Result<f64> {
    let fu = &spec.minor_cost.f1_u;
    solve_first_order(slope, |u| fu(t, x, u, x0), spec.minor_cost.control_curvature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use std::sync::Arc;

    fn summary() -> MeasureSummary {
        MeasureSummary { mean: 0.0, intercepts: [0.0; 5], moments: vec![0.0] }
    }

    #[test]
    fn hamiltonian_arithmetic() {
        let mut spec = catalog::zero_cost();
        assert_eq!(hamiltonian_major(0.0, 1.0, MajorAdjoint::default(), 3.0, &summary(), &spec).unwrap(), 0.0);
        // b0 = u0, sigma0 = 1, f0 = u0^2 / 2
        spec.major_cost.f0 = Arc::new(|_, _, u, _| 0.5 * u * u);
        let mut m = summary();
        m.intercepts[1] = 1.0;
        let h = hamiltonian_major(0.0, 0.0, MajorAdjoint { p0: 3.0, q0: 2.0 }, 1.0, &m, &spec).unwrap();
        assert_eq!(h, 5.5);
    }

    #[test]
    fn closed_form_major() {
        let mut spec = catalog::zero_cost();
        spec.major_cost.f0_u = Arc::new(|_, _, u, _| 2.0 * u);
        spec.major_cost.control_curvature = Some(2.0);
        let u = minimize_major(0.0, 0.0, MajorAdjoint { p0: 4.0, q0: 0.0 }, &summary(), &spec).unwrap();
        assert_eq!(u, -2.0);
    }

    #[test]
    fn newton_on_cubic() {
        let mut spec = catalog::zero_cost();
        spec.major_cost.f0_u = Arc::new(|_, _, u, _| u + u * u * u);
        spec.major_cost.control_curvature = None;
        let u = minimize_major(0.0, 0.0, MajorAdjoint { p0: -2.0, q0: 0.0 }, &summary(), &spec).unwrap();
        assert!((u - 1.0).abs() < 1e-9, "{u}");
        let far = minimize_major(0.0, 0.0, MajorAdjoint { p0: 1e6, q0: 0.0 }, &summary(), &spec).unwrap();
        assert!((far + far.powi(3) + 1e6).abs() <= 1e-6, "{far}");
    }

    #[test]
    fn inconsistent_degenerate_cost_is_reported() {
        let spec = catalog::zero_cost();
        let err = minimize_minor(0.0, 0.0, MinorAdjoint { p: 1.0, q: 0.0, q_tilde: 0.0 }, 0.0, &spec).unwrap_err();
        assert!(matches!(err, MfgError::MinimizerNotFound { .. }));
        assert_eq!(minimize_minor(0.0, 0.0, MinorAdjoint::default(), 0.0, &spec).unwrap(), 0.0);
    }
}

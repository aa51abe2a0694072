//! Perturbed systems `E(gamma, I)` and continuation in `gamma` from the
//! trivially solvable `E(0, 0)` to the full system `E(1, 0)`.

use serde::{Deserialize, Serialize};

use super::engine::{
    backward, budget_warning, cold_start, flow_from_forward, forward, into_field, picard, Ctx, FlowSource, Mode,
    PicardResult,
};
use super::{snorm, snorm_distance, Diagnostics, InputField, SolutionField, SolverConfig};
use crate::error::{MfgError, Result};
use crate::model::{Coef, ModelSpec};
use crate::stochastics::PathBundle;

/// Record of one accepted continuation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStep {
    /// `gamma` before the step.
    pub gamma: f64,
    pub eta: f64,
    /// Fixed-point iterations of the continuation map.
    pub iterations: usize,
    /// Largest observed ratio `d_{j+1} / d_j` of successive differences,
    /// ignoring differences at the noise floor (0 if none qualify).
    pub ratio: f64,
    /// Relative change at each iteration.
    pub distances: Vec<f64>,
}

fn check_warm(warm: &SolutionField, bundle: &PathBundle) -> Result<()> {
    if warm.grid != bundle.grid || warm.n_scenarios != bundle.n_scenarios || warm.n_particles != bundle.n_particles {
        return Err(MfgError::ShapeMismatch("warm start does not match the bundle".into()));
    }
    if warm.minor.x.is_empty() || warm.major.x0.is_empty() {
        return Err(MfgError::ShapeMismatch("warm start must be a coupled solution".into()));
    }
    Ok(())
}

fn solve_perturbed_tol(
    spec: &ModelSpec,
    gamma: f64,
    inputs: Option<&InputField>,
    bundle: &PathBundle,
    cfg: &SolverConfig,
    warm: Option<&SolutionField>,
    tol: f64,
) -> Result<SolutionField> {
    cfg.validate()?;
    let ctx = Ctx::new(spec, bundle, cfg.basis_degree, cfg.scheme, gamma, inputs)?;
    if gamma == 0.0 {
        // States do not depend on the adjoints: simulate, fit, re-simulate.
        let (maps, _) = cold_start(&ctx)?;
        let fwd = forward(&ctx, Mode::Coupled, &maps, FlowSource::SelfConsistent)?;
        let flow = flow_from_forward(&ctx, &fwd);
        let (maps, res) = backward(&ctx, Mode::Coupled, &fwd, &flow, &maps)?;
        let fwd = forward(&ctx, Mode::Coupled, &maps, FlowSource::Frozen(&flow))?;
        let diagnostics = Diagnostics { regression_residual: res, ..Default::default() };
        return Ok(into_field(&ctx, PicardResult { fwd, maps, flow, diagnostics }));
    }
    let res = match warm {
        Some(w) => {
            check_warm(w, bundle)?;
            if w.maps.degree != cfg.basis_degree {
                return Err(MfgError::ShapeMismatch("warm start uses another basis degree".into()));
            }
            picard(&ctx, Mode::Coupled, cfg, w.maps.clone(), w.flow.clone(), tol, false)?
        }
        None => {
            let (maps, flow) = cold_start(&ctx)?;
            picard(&ctx, Mode::Coupled, cfg, maps, flow, tol, true)?
        }
    };
    Ok(into_field(&ctx, res))
}

/// Solves the perturbed system `E(gamma, I)`: coefficients scaled by
/// `gamma` plus exogenous inputs. `gamma = 0` is solved directly; otherwise
/// damped Picard, warm-started from `warm` when given.
pub fn solve_perturbed(
    spec: &ModelSpec,
    gamma: f64,
    inputs: Option<&InputField>,
    bundle: &PathBundle,
    cfg: &SolverConfig,
    warm: Option<&SolutionField>,
) -> Result<SolutionField> {
    solve_perturbed_tol(spec, gamma, inputs, bundle, cfg, warm, cfg.picard_tol)
}

/// The inputs `eta * F(current) + I`, where `F` evaluates the model
/// coefficients, Hamiltonian gradients and terminal gradients along the
/// stored tuples of `current`.
pub fn continuation_inputs(
    spec: &ModelSpec,
    current: &SolutionField,
    eta: f64,
    inputs: Option<&InputField>,
) -> Result<InputField> {
    let n = current.n_steps();
    let (ks, m) = (current.n_scenarios, current.n_particles);
    if current.major.x0.is_empty() || current.minor.x.is_empty() {
        return Err(MfgError::ShapeMismatch("continuation needs a coupled solution".into()));
    }
    let mut out = InputField::zeros(n, ks, m);
    for s in 0..ks {
        for k in 0..=n {
            let t = current.grid.t(k);
            let ms = current.flow.summary(s, k);
            let i = current.major_idx(s, k);
            let (x0, p0, q0, u0) = (current.major.x0[i], current.major.p0[i], current.major.q0[i], current.major.u0[i]);
            if k < n {
                out.b0[i] = eta * spec.eval_coef(Coef::MajorDrift, t, x0, u0, ms);
                out.sigma0[i] = eta * spec.eval_coef(Coef::MajorVol, t, x0, u0, ms);
                out.f0[i] = eta * spec.major_h_x(t, x0, p0, q0, u0, ms);
            } else {
                out.g0[s] = eta * (spec.major_cost.g0_x)(x0, &ms.moments);
            }
            for j in 0..m {
                let i = current.minor_idx(s, j, k);
                let mi = &current.minor;
                let (x, p, q, qt, u) = (mi.x[i], mi.p[i], mi.q[i], mi.q_tilde[i], mi.u[i]);
                if k < n {
                    out.b[i] = eta * spec.eval_coef(Coef::MinorDrift, t, x, u, ms);
                    out.sigma[i] = eta * spec.eval_coef(Coef::MinorVol, t, x, u, ms);
                    out.sigma_tilde[i] = eta * spec.eval_coef(Coef::MinorCommonVol, t, x, u, ms);
                    out.f[i] = eta * spec.minor_h_x(t, x, p, q, qt, u, ms, x0);
                } else {
                    out.g[s * m + j] = eta * (spec.minor_cost.g_x)(x, &ms.moments, x0);
                }
            }
        }
    }
    match inputs {
        Some(inp) => out.axpy(1.0, inp),
        None => Ok(out),
    }
}

/// The continuation map: solves `E(gamma, eta F(current) + I)`, warm-started
/// from `current`.
pub fn phi_map(
    spec: &ModelSpec,
    current: &SolutionField,
    gamma: f64,
    eta: f64,
    inputs: Option<&InputField>,
    bundle: &PathBundle,
    cfg: &SolverConfig,
) -> Result<SolutionField> {
    let shifted = continuation_inputs(spec, current, eta, inputs)?;
    let warm = (gamma > 0.0).then_some(current);
    solve_perturbed_tol(spec, gamma, Some(&shifted), bundle, cfg, warm, 0.25 * cfg.picard_tol)
}

/// Fixed-point iteration of the continuation map at one step. Returns the
/// converged field and the step record, or `None` if it did not converge.
fn continuation_step(
    spec: &ModelSpec,
    base: &SolutionField,
    gamma: f64,
    eta: f64,
    bundle: &PathBundle,
    cfg: &SolverConfig,
) -> Result<Option<(SolutionField, ContinuationStep)>> {
    let tol = cfg.picard_tol;
    let mut theta = base.clone();
    let mut distances = Vec::new();
    let mut abs_dist: Vec<f64> = Vec::new();
    for it in 1..=cfg.max_phi_iterations {
        let next = match phi_map(spec, &theta, gamma, eta, None, bundle, cfg) {
            Ok(f) => f,
            Err(MfgError::PicardDivergence { .. } | MfgError::PicardNonConvergence { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let d = snorm_distance(&next, &theta)?;
        let size = snorm(&next);
        let floor = 10.0 * tol * size;
        abs_dist.push(d);
        distances.push(d / size.max(f64::MIN_POSITIVE));
        theta = next;
        if d <= tol * size {
            let ratio = abs_dist
                .windows(2)
                .filter(|w| w[0] > floor)
                .map(|w| w[1] / w[0])
                .fold(0.0, f64::max);
            theta.gamma = gamma + eta;
            let step = ContinuationStep { gamma, eta, iterations: it, ratio, distances };
            return Ok(Some((theta, step)));
        }
        if let [.., a, b] = abs_dist[..] {
            if b > a && a > floor && abs_dist.len() >= 4 && b > 2.0 * abs_dist[0] {
                return Ok(None);
            }
        }
    }
    Ok(None)
}

/// Continuation in `gamma`: starts from `E(0, 0)` and advances by steps of
/// at most `continuation_step`, halving the step when the continuation map
/// fails to converge and doubling it back after quick steps.
pub fn solve_continuation(spec: &ModelSpec, bundle: &PathBundle, cfg: &SolverConfig) -> Result<SolutionField> {
    cfg.validate()?;
    let mut theta = solve_perturbed(spec, 0.0, None, bundle, cfg, None)?;
    let mut gamma = 0.0;
    let mut eta = cfg.continuation_step;
    let mut steps = Vec::new();
    while gamma < 1.0 {
        let eta_eff = eta.min(1.0 - gamma);
        match continuation_step(spec, &theta, gamma, eta_eff, bundle, cfg)? {
            Some((next, step)) => {
                let quick = step.iterations <= 3;
                steps.push(step);
                theta = next;
                gamma = if 1.0 - (gamma + eta_eff) < 1e-12 { 1.0 } else { gamma + eta_eff };
                if quick {
                    eta = (2.0 * eta).min(cfg.continuation_step);
                }
            }
            None => {
                eta *= 0.5;
                if eta < cfg.min_step {
                    return Err(MfgError::ContinuationStalled { gamma, min_step: cfg.min_step });
                }
            }
        }
    }
    theta.gamma = 1.0;
    theta.diagnostics.continuation = steps;
    if let Some(w) = budget_warning(spec, cfg) {
        theta.diagnostics.warnings.push(w);
    }
    Ok(theta)
}

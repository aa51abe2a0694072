//! Discretized conditional McKean-Vlasov FBSDE: frozen-flow solves for the
//! major and minor problems, the coupled Picard solver, the perturbed
//! systems and the continuation driver.
//!
//! Layout: major arrays are indexed `s * (n + 1) + k`, minor arrays
//! `(s * M + j) * (n + 1) + k`, flow particles `(s * (n + 1) + k) * M + j`.

mod continuation;
mod engine;
mod export;

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::model::MeasureSummary;
use crate::stochastics::{w2_squared, TimeGrid};

pub use continuation::{phi_map, solve_continuation, solve_perturbed, ContinuationStep};
pub use engine::{
    backward_step, evaluate_major_feedback, evaluate_minor_feedback, simulate_with_maps, solve_coupled_picard,
    solve_PX0m, solve_Pm, BackwardStepResult, MajorSolution, MinorSolution,
};
pub use export::{write_field_csv, write_manifest, CSV_SCHEMA_VERSION};
pub(crate) use engine::{major_feedback, minor_feedback};
pub(crate) use export::schema_line;

/// How conditional expectations are taken in the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackwardScheme {
    /// Fit `p_{k+1}` on step-`k+1` features, then integrate the fitted
    /// polynomial exactly over the one-step Euler transition with
    /// Gauss-Hermite nodes.
    #[default]
    RegressLater,
    /// Regress `p_{k+1}` and `p_{k+1} dW / dt` directly on step-`k` features.
    RegressNow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub n_scenarios: usize,
    pub n_particles: usize,
    pub seed: u64,
    /// Damping `lambda` on the feedback maps and the measure flow.
    pub picard_damping: f64,
    pub max_picard: usize,
    /// Relative change in the S-norm at which iterations stop.
    pub picard_tol: f64,
    /// Initial and maximal continuation step `eta0`.
    pub continuation_step: f64,
    pub min_step: f64,
    /// Cap on fixed-point iterations of the continuation map per step.
    pub max_phi_iterations: usize,
    pub basis_degree: usize,
    pub scheme: BackwardScheme,
    /// Coupling budget above which a warning is attached to the result.
    pub coupling_delta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            n_scenarios: 64,
            n_particles: 256,
            seed: 1,
            picard_damping: 0.5,
            max_picard: 200,
            picard_tol: 1e-4,
            continuation_step: 0.25,
            min_step: 1e-3,
            max_phi_iterations: 40,
            basis_degree: 1,
            scheme: BackwardScheme::RegressLater,
            coupling_delta: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MfgError::InvalidArgument(m.to_string()));
        if self.n_steps == 0 || self.n_scenarios == 0 || self.n_particles == 0 {
            return bad("n_steps, n_scenarios and n_particles must be positive");
        }
        if !(self.picard_damping > 0.0 && self.picard_damping <= 1.0) {
            return bad("picard_damping must lie in (0, 1]");
        }
        if !(self.continuation_step > 0.0 && self.continuation_step <= 1.0) {
            return bad("continuation_step must lie in (0, 1]");
        }
        if !(self.min_step > 0.0 && self.min_step <= self.continuation_step) {
            return bad("min_step must lie in (0, continuation_step]");
        }
        if !(self.picard_tol > 0.0) || self.max_picard == 0 || self.max_phi_iterations == 0 {
            return bad("picard_tol, max_picard and max_phi_iterations must be positive");
        }
        if self.basis_degree == 0 || self.basis_degree > 6 {
            return bad("basis_degree must lie in 1..=6");
        }
        Ok(())
    }
}

/// Major processes, `s * (n + 1) + k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MajorPaths {
    pub x0: Vec<f64>,
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    pub u0: Vec<f64>,
}

impl MajorPaths {
    pub fn zeros(len: usize) -> Self {
        Self { x0: vec![0.0; len], p0: vec![0.0; len], q0: vec![0.0; len], u0: vec![0.0; len] }
    }
}

/// Minor processes, `(s * M + j) * (n + 1) + k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinorPaths {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub u: Vec<f64>,
}

impl MinorPaths {
    pub fn zeros(len: usize) -> Self {
        Self { x: vec![0.0; len], p: vec![0.0; len], q: vec![0.0; len], q_tilde: vec![0.0; len], u: vec![0.0; len] }
    }
}

/// A frozen major state path with the drift and volatility that generated
/// it, `s * (n + 1) + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorPath {
    pub x0: Vec<f64>,
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
}

/// Conditional laws `m_k` per scenario, as particle clouds, with their
/// kernel summaries and the average particle drift and common-noise
/// volatility used to propagate the mean over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    pub n_scenarios: usize,
    pub n_particles: usize,
    pub n_steps: usize,
    /// `(s * (n + 1) + k) * M + j`
    pub particles: Vec<f64>,
    pub summaries: Vec<MeasureSummary>,
    pub mean_drift: Vec<f64>,
    pub mean_vol0: Vec<f64>,
}

impl MeasureFlow {
    #[inline]
    pub fn idx(&self, s: usize, k: usize) -> usize {
        s * (self.n_steps + 1) + k
    }

    pub fn summary(&self, s: usize, k: usize) -> &MeasureSummary {
        &self.summaries[self.idx(s, k)]
    }

    pub fn ensemble(&self, s: usize, k: usize) -> &[f64] {
        let i = self.idx(s, k) * self.n_particles;
        &self.particles[i..i + self.n_particles]
    }

    /// `sup_k mean_s W2^2(self_k, other_k)`.
    pub fn sup_w2_squared(&self, other: &MeasureFlow) -> Result<f64> {
        if self.particles.len() != other.particles.len() {
            return Err(MfgError::ShapeMismatch("measure flows differ in size".into()));
        }
        let mut worst = 0.0f64;
        for k in 0..=self.n_steps {
            let mut acc = 0.0;
            for s in 0..self.n_scenarios {
                acc += w2_squared(self.ensemble(s, k), other.ensemble(s, k))?;
            }
            worst = worst.max(acc / self.n_scenarios as f64);
        }
        Ok(worst)
    }
}

/// Fitted coefficient vectors of the conditional-expectation maps, one per
/// knot. Major features are polynomials in `(X0, mbar)`, minor features in
/// `(X, X0, mbar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMaps {
    pub degree: usize,
    pub major_p: Vec<Vec<f64>>,
    pub major_q: Vec<Vec<f64>>,
    pub minor_p: Vec<Vec<f64>>,
    pub minor_q: Vec<Vec<f64>>,
    pub minor_q_tilde: Vec<Vec<f64>>,
}

impl FeedbackMaps {
    pub fn zeros(n_steps: usize, degree: usize) -> Self {
        let pm = crate::regression::PolyBasis::new(2, degree).len();
        let pn = crate::regression::PolyBasis::new(3, degree).len();
        let z = |p: usize| vec![vec![0.0; p]; n_steps + 1];
        Self { degree, major_p: z(pm), major_q: z(pm), minor_p: z(pn), minor_q: z(pn), minor_q_tilde: z(pn) }
    }

    /// `lambda * new + (1 - lambda) * self`.
    pub fn blend(&mut self, new: &FeedbackMaps, lambda: f64) {
        let mix = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x = lambda * y + (1.0 - lambda) * *x;
                }
            }
        };
        mix(&mut self.major_p, &new.major_p);
        mix(&mut self.major_q, &new.major_q);
        mix(&mut self.minor_p, &new.minor_p);
        mix(&mut self.minor_q, &new.minor_q);
        mix(&mut self.minor_q_tilde, &new.minor_q_tilde);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Relative S-norm change per iteration.
    pub residuals: Vec<f64>,
    /// Relative consistency gap `sup_k E W2^2` per iteration (coupled solves).
    pub consistency: Vec<f64>,
    /// Mean squared regression residual of the last backward sweep.
    pub regression_residual: f64,
    pub continuation: Vec<ContinuationStep>,
    pub warnings: Vec<String>,
}

/// Discrete solution of the coupled system on a path bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub grid: TimeGrid,
    pub n_scenarios: usize,
    pub n_particles: usize,
    pub gamma: f64,
    pub major: MajorPaths,
    pub minor: MinorPaths,
    pub flow: MeasureFlow,
    pub maps: FeedbackMaps,
    pub diagnostics: Diagnostics,
}

impl SolutionField {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    #[inline]
    pub fn major_idx(&self, s: usize, k: usize) -> usize {
        s * (self.n_steps() + 1) + k
    }

    #[inline]
    pub fn minor_idx(&self, s: usize, j: usize, k: usize) -> usize {
        (s * self.n_particles + j) * (self.n_steps() + 1) + k
    }

    /// The major path with the drift and volatility it was generated with.
    pub fn major_path(&self, spec: &crate::model::ModelSpec, inputs: Option<&InputField>) -> MajorPath {
        engine::major_path_of(self, spec, inputs)
    }
}

/// Exogenous inputs of the perturbed system. Major arrays are indexed
/// `s * (n + 1) + k`, minor arrays `(s * M + j) * (n + 1) + k`; terminal
/// arrays per scenario and per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct InputField {
    pub n_steps: usize,
    pub n_scenarios: usize,
    pub n_particles: usize,
    pub b0: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub f0: Vec<f64>,
    pub g0: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl InputField {
    pub fn zeros(n_steps: usize, n_scenarios: usize, n_particles: usize) -> Self {
        let maj = n_scenarios * (n_steps + 1);
        let min = maj * n_particles;
        Self {
            n_steps,
            n_scenarios,
            n_particles,
            b0: vec![0.0; maj],
            sigma0: vec![0.0; maj],
            f0: vec![0.0; maj],
            g0: vec![0.0; n_scenarios],
            b: vec![0.0; min],
            sigma: vec![0.0; min],
            sigma_tilde: vec![0.0; min],
            f: vec![0.0; min],
            g: vec![0.0; n_scenarios * n_particles],
        }
    }

    pub fn for_field(field: &SolutionField) -> Self {
        Self::zeros(field.n_steps(), field.n_scenarios, field.n_particles)
    }

    pub(crate) fn check(&self, n_steps: usize, n_scenarios: usize, n_particles: usize) -> Result<()> {
        if (self.n_steps, self.n_scenarios, self.n_particles) != (n_steps, n_scenarios, n_particles) {
            return Err(MfgError::ShapeMismatch(format!(
                "inputs are {}x{}x{}, solver expects {}x{}x{}",
                self.n_scenarios, self.n_particles, self.n_steps, n_scenarios, n_particles, n_steps
            )));
        }
        let all = [&self.b0, &self.sigma0, &self.f0, &self.g0, &self.b, &self.sigma, &self.sigma_tilde, &self.f, &self.g];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(MfgError::InvalidArgument("inputs must be finite".into()));
        }
        Ok(())
    }

    /// Discrete input norm: terminal second moments plus `dt`-weighted sums
    /// over steps `k < n` of the running inputs.
    pub fn norm(&self, grid: &TimeGrid) -> f64 {
        let n = self.n_steps;
        let dt = grid.dt();
        let (ks, km) = (self.n_scenarios as f64, (self.n_scenarios * self.n_particles) as f64);
        let mean_sq = |v: &[f64], count: f64| v.iter().map(|x| x * x).sum::<f64>() / count;
        let running = |v: &[f64], count: f64| {
            v.chunks(n + 1).map(|row| row[..n].iter().map(|x| x * x).sum::<f64>()).sum::<f64>() * dt / count
        };
        let total = mean_sq(&self.g0, ks)
            + mean_sq(&self.g, km)
            + running(&self.b0, ks)
            + running(&self.sigma0, ks)
            + running(&self.f0, ks)
            + running(&self.b, km)
            + running(&self.sigma, km)
            + running(&self.sigma_tilde, km)
            + running(&self.f, km);
        total.sqrt()
    }

    /// `self + c * other`, elementwise.
    pub fn axpy(&self, c: f64, other: &InputField) -> Result<InputField> {
        other.check(self.n_steps, self.n_scenarios, self.n_particles)?;
        let f = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x + c * y).collect();
        Ok(InputField {
            n_steps: self.n_steps,
            n_scenarios: self.n_scenarios,
            n_particles: self.n_particles,
            b0: f(&self.b0, &other.b0),
            sigma0: f(&self.sigma0, &other.sigma0),
            f0: f(&self.f0, &other.f0),
            g0: f(&self.g0, &other.g0),
            b: f(&self.b, &other.b),
            sigma: f(&self.sigma, &other.sigma),
            sigma_tilde: f(&self.sigma_tilde, &other.sigma_tilde),
            f: f(&self.f, &other.f),
            g: f(&self.g, &other.g),
        })
    }
}

pub(crate) fn check_same_shape(a: &SolutionField, b: &SolutionField) -> Result<()> {
    if a.grid != b.grid || a.n_scenarios != b.n_scenarios || a.n_particles != b.n_particles {
        return Err(MfgError::ShapeMismatch(format!(
            "fields {}x{}x{} and {}x{}x{}",
            a.n_scenarios,
            a.n_particles,
            a.n_steps(),
            b.n_scenarios,
            b.n_particles,
            b.n_steps()
        )));
    }
    Ok(())
}

/// Core of the S-norm. Empty blocks are skipped, so major-only and
/// minor-only results use the same norm.
pub(crate) fn snorm_core(
    grid: &TimeGrid,
    n_scenarios: usize,
    n_particles: usize,
    ma: &MajorPaths,
    mb: Option<&MajorPaths>,
    na: &MinorPaths,
    nb: Option<&MinorPaths>,
) -> f64 {
    let n = grid.n_steps();
    let dt = grid.dt();
    let (ks, km) = (n_scenarios as f64, (n_scenarios * n_particles) as f64);
    let d = |x: &[f64], y: Option<&[f64]>, i: usize| match y {
        Some(y) => x[i] - y[i],
        None => x[i],
    };
    let mut sup_terms = vec![0.0; n + 1];
    let mut integral = 0.0;
    if !ma.x0.is_empty() {
        for s in 0..n_scenarios {
            for k in 0..=n {
                let i = s * (n + 1) + k;
                let dx = d(&ma.x0, mb.map(|m| &m.x0[..]), i);
                let dp = d(&ma.p0, mb.map(|m| &m.p0[..]), i);
                sup_terms[k] += (dx * dx + dp * dp) / ks;
                if k < n {
                    let du = d(&ma.u0, mb.map(|m| &m.u0[..]), i);
                    let dq = d(&ma.q0, mb.map(|m| &m.q0[..]), i);
                    integral += dt * (du * du + dq * dq) / ks;
                }
            }
        }
    }
    if !na.x.is_empty() {
        for row in 0..n_scenarios * n_particles {
            for k in 0..=n {
                let i = row * (n + 1) + k;
                let dx = d(&na.x, nb.map(|m| &m.x[..]), i);
                let dp = d(&na.p, nb.map(|m| &m.p[..]), i);
                sup_terms[k] += (dx * dx + dp * dp) / km;
                if k < n {
                    let du = d(&na.u, nb.map(|m| &m.u[..]), i);
                    let dq = d(&na.q, nb.map(|m| &m.q[..]), i);
                    let dqt = d(&na.q_tilde, nb.map(|m| &m.q_tilde[..]), i);
                    integral += dt * (du * du + dq * dq + dqt * dqt) / km;
                }
            }
        }
    }
    let sup = sup_terms.iter().fold(0.0f64, |a, &b| a.max(b));
    (sup + integral).sqrt()
}

fn snorm_impl(a: &SolutionField, b: Option<&SolutionField>) -> f64 {
    snorm_core(&a.grid, a.n_scenarios, a.n_particles, &a.major, b.map(|b| &b.major), &a.minor, b.map(|b| &b.minor))
}

/// Discrete S-norm distance: square root of the largest (over knots) mean
/// squared gap in `(X0, p0, X, p)` plus the `dt`-weighted mean squared gaps
/// in `(u0, q0, u, q, q~)` over steps `k < n`.
pub fn snorm_distance(a: &SolutionField, b: &SolutionField) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(snorm_impl(a, Some(b)))
}

/// S-norm of a field (its distance to the zero field).
pub fn snorm(a: &SolutionField) -> f64 {
    snorm_impl(a, None)
}

/// `snorm_distance(a, b) / snorm(reference)`.
pub fn relative_snorm_distance(a: &SolutionField, b: &SolutionField, reference: &SolutionField) -> Result<f64> {
    Ok(snorm_distance(a, b)? / snorm(reference).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests;

//! The (N+1)-agent game driven by the limit controls: propagation of chaos
//! and epsilon-Nash gaps, with log-log scaling fits over N.
//!
//! Agent `0` is the major, agents `1..=N` are minors. The limit controls are
//! the solved feedback maps evaluated along the limit dynamics, then frozen
//! as open-loop paths; the finite game replays them with empirical-average
//! intercepts on the same noises.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::fbsde::{major_feedback, minor_feedback, schema_line, FeedbackMaps, SolutionField};
use crate::lq_oracle::{best_response_correction, solve_riccati};
use crate::model::{Coef, MeasureSummary, ModelSpec};
use crate::regression::PolyBasis;
use crate::stochastics::{PathBundle, Population, TimeGrid};

fn hash_slice(h: &mut DefaultHasher, v: &[f64]) {
    for x in v {
        h.write_u64(x.to_bits());
    }
}

fn common_key(bundle: &PathBundle) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(bundle.n_scenarios);
    hash_slice(&mut h, &bundle.xi0);
    hash_slice(&mut h, &bundle.dw0);
    h.finish()
}

/// Hash of the noises seen by agents `0..=n`.
fn noise_key(bundle: &PathBundle, n: usize) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_u64(common_key(bundle));
    h.write_usize(n);
    for s in 0..bundle.n_scenarios {
        for j in 0..n {
            h.write_u64(bundle.xi(s, j).to_bits());
            hash_slice(&mut h, bundle.idiosyncratic(s, j));
        }
    }
    h.finish()
}

/// The limit measure flow along each common-noise scenario, with the major's
/// limit path and control.
#[derive(Debug, Clone)]
pub struct LimitFlow {
    pub grid: TimeGrid,
    pub n_replications: usize,
    /// Particles behind each summary.
    pub n_particles: usize,
    /// `s * (n + 1) + k`
    pub summaries: Vec<MeasureSummary>,
    /// `s * (n + 1) + k`
    pub x0: Vec<f64>,
    /// `s * n + k`
    pub u0: Vec<f64>,
    pub maps: FeedbackMaps,
    common: u64,
}

impl LimitFlow {
    /// Takes the flow and major path of a solved field. `bundle` must be the
    /// bundle the field was solved on.
    pub fn from_field(field: &SolutionField, bundle: &PathBundle) -> Result<Self> {
        if field.grid != bundle.grid || field.n_scenarios != bundle.n_scenarios {
            return Err(MfgError::ShapeMismatch("field and bundle differ in grid or scenarios".into()));
        }
        if field.major.x0.is_empty() || field.flow.summaries.is_empty() {
            return Err(MfgError::ShapeMismatch("limit flow needs a coupled solution".into()));
        }
        let n = field.n_steps();
        let mut u0 = Vec::with_capacity(field.n_scenarios * n);
        for s in 0..field.n_scenarios {
            u0.extend_from_slice(&field.major.u0[field.major_idx(s, 0)..field.major_idx(s, n)]);
        }
        Ok(Self {
            grid: field.grid,
            n_replications: field.n_scenarios,
            n_particles: field.n_particles,
            summaries: field.flow.summaries.clone(),
            x0: field.major.x0.clone(),
            u0,
            maps: field.maps.clone(),
            common: common_key(bundle),
        })
    }

    /// Simulates a particle cloud of `bundle.n_particles` per scenario under
    /// `maps`, with the flow taken from the cloud itself. Same dynamics as
    /// [`crate::fbsde::simulate_with_maps`], keeping only the summaries.
    pub fn simulate(spec: &ModelSpec, maps: &FeedbackMaps, bundle: &PathBundle) -> Result<Self> {
        let n = bundle.n_steps();
        if maps.major_p.len() != n + 1 {
            return Err(MfgError::ShapeMismatch(format!(
                "maps have {} knots, grid has {}",
                maps.major_p.len(),
                n + 1
            )));
        }
        let (bmaj, bmin) = (PolyBasis::new(2, maps.degree), PolyBasis::new(3, maps.degree));
        let grid = bundle.grid;
        let dt = grid.dt();
        let m = bundle.n_particles;
        type Part = (Vec<MeasureSummary>, Vec<f64>, Vec<f64>);
        let parts: Vec<Part> = (0..bundle.n_scenarios)
            .into_par_iter()
            .map(|s| -> Result<Part> {
                let dw0 = bundle.common(s);
                let mut xs: Vec<f64> = (0..m).map(|j| bundle.xi(s, j)).collect();
                let mut x0 = bundle.xi0[s];
                let (mut sums, mut x0s, mut u0s) = (Vec::with_capacity(n + 1), Vec::with_capacity(n + 1), Vec::with_capacity(n));
                for k in 0..=n {
                    let t = grid.t(k);
                    let ms = spec.summarize(t, &xs);
                    x0s.push(x0);
                    if k < n {
                        let (_, _, u0) = major_feedback(spec, &bmaj, maps, k, t, x0, &ms, None)?;
                        u0s.push(u0);
                        for (j, x) in xs.iter_mut().enumerate() {
                            let (_, _, _, u) = minor_feedback(spec, &bmin, maps, k, t, *x, x0, ms.mean, None)?;
                            *x = minor_step(spec, t, *x, u, &ms, dt, bundle.idiosyncratic(s, j)[k], dw0[k]);
                        }
                        x0 = major_step(spec, t, x0, u0, &ms, dt, dw0[k]);
                        if !x0.is_finite() || !xs.iter().all(|v| v.is_finite()) {
                            return Err(MfgError::ModelEvaluation {
                                function: "limit flow",
                                tuple: format!("scenario {s}, step {k}"),
                            });
                        }
                    }
                    sums.push(ms);
                }
                Ok((sums, x0s, u0s))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            grid,
            n_replications: bundle.n_scenarios,
            n_particles: m,
            summaries: Vec::with_capacity(bundle.n_scenarios * (n + 1)),
            x0: Vec::with_capacity(bundle.n_scenarios * (n + 1)),
            u0: Vec::with_capacity(bundle.n_scenarios * n),
            maps: maps.clone(),
            common: common_key(bundle),
        };
        for (sums, x0s, u0s) in parts {
            out.summaries.extend(sums);
            out.x0.extend(x0s);
            out.u0.extend(u0s);
        }
        Ok(out)
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn summary(&self, s: usize, k: usize) -> &MeasureSummary {
        &self.summaries[s * (self.n_steps() + 1) + k]
    }
}

#[inline]
fn major_step(spec: &ModelSpec, t: f64, x0: f64, u0: f64, ms: &MeasureSummary, dt: f64, dw0: f64) -> f64 {
    let drift = spec.eval_coef(Coef::MajorDrift, t, x0, u0, ms);
    let vol = spec.eval_coef(Coef::MajorVol, t, x0, u0, ms);
    x0 + drift * dt + vol * dw0
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn minor_step(spec: &ModelSpec, t: f64, x: f64, u: f64, ms: &MeasureSummary, dt: f64, dw: f64, dw0: f64) -> f64 {
    let drift = spec.eval_coef(Coef::MinorDrift, t, x, u, ms);
    let vol = spec.eval_coef(Coef::MinorVol, t, x, u, ms);
    let vol0 = spec.eval_coef(Coef::MinorCommonVol, t, x, u, ms);
    x + drift * dt + vol * dw + vol0 * dw0
}

/// Open-loop control paths of all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentControls {
    pub n_agents: usize,
    pub n_replications: usize,
    pub n_steps: usize,
    /// `s * n + k`
    pub u0: Vec<f64>,
    /// `(s * N + i - 1) * n + k` for minor `i`
    pub u: Vec<f64>,
}

impl AgentControls {
    /// Control of agent `i` (0 = major) at step `k`.
    pub fn get(&self, s: usize, i: usize, k: usize) -> f64 {
        if i == 0 {
            self.u0[s * self.n_steps + k]
        } else {
            self.u[(s * self.n_agents + i - 1) * self.n_steps + k]
        }
    }

    fn check(&self) -> Result<()> {
        let (ks, n, na) = (self.n_replications, self.n_steps, self.n_agents);
        if self.u0.len() != ks * n || self.u.len() != ks * na * n {
            return Err(MfgError::ShapeMismatch("control paths do not match their declared sizes".into()));
        }
        Ok(())
    }
}

/// Limit agents `i = 0..=N`: the representative dynamics driven by per-agent
/// noises, all sharing the limit flow of their scenario.
#[derive(Debug, Clone)]
pub struct LimitAgents {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub n_replications: usize,
    /// `s * (n + 1) + k`
    pub x0: Vec<f64>,
    /// `(s * N + i - 1) * (n + 1) + k`
    pub x: Vec<f64>,
    pub controls: AgentControls,
    /// Limit mean `mbar` at `s * (n + 1) + k`.
    pub mean: Vec<f64>,
    /// Average of the `N` limit minor states at `s * (n + 1) + k`.
    pub agent_mean: Vec<f64>,
    noise: u64,
}

impl LimitAgents {
    /// State of agent `i` at knot `k`.
    pub fn state(&self, s: usize, i: usize, k: usize) -> f64 {
        let n1 = self.grid.n_steps() + 1;
        if i == 0 {
            self.x0[s * n1 + k]
        } else {
            self.x[(s * self.n_agents + i - 1) * n1 + k]
        }
    }
}

fn check_game_bundle(grid: &TimeGrid, n_replications: usize, n_agents: usize, bundle: &PathBundle) -> Result<()> {
    if n_agents == 0 {
        return Err(MfgError::InvalidArgument("the game needs at least one minor agent".into()));
    }
    if bundle.grid != *grid {
        return Err(MfgError::ShapeMismatch("bundle grid differs".into()));
    }
    if bundle.n_scenarios != n_replications {
        return Err(MfgError::ScenarioMismatch { left: bundle.n_scenarios, right: n_replications });
    }
    if bundle.n_particles < n_agents {
        return Err(MfgError::SizeMismatch { left: bundle.n_particles, right: n_agents });
    }
    Ok(())
}

/// Evaluates the feedback maps of `flow` along agents driven by the first
/// `n_agents` idiosyncratic paths of `bundle` and its common path, which
/// must be the one `flow` was built on.
pub fn simulate_limit_agents(flow: &LimitFlow, spec: &ModelSpec, n_agents: usize, bundle: &PathBundle) -> Result<LimitAgents> {
    check_game_bundle(&flow.grid, flow.n_replications, n_agents, bundle)?;
    if common_key(bundle) != flow.common {
        return Err(MfgError::ShapeMismatch("bundle common noise differs from the limit flow's".into()));
    }
    let grid = flow.grid;
    let (n, dt, na) = (grid.n_steps(), grid.dt(), n_agents);
    let bmin = PolyBasis::new(3, flow.maps.degree);
    type Part = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let parts: Vec<Part> = (0..flow.n_replications)
        .into_par_iter()
        .map(|s| -> Result<Part> {
            let dw0 = bundle.common(s);
            let mut x = vec![0.0; na * (n + 1)];
            let mut u = vec![0.0; na * n];
            let mut agent_mean = vec![0.0; n + 1];
            for i in 0..na {
                let dw = bundle.idiosyncratic(s, i);
                let mut xi = bundle.xi(s, i);
                for k in 0..=n {
                    x[i * (n + 1) + k] = xi;
                    if k == n {
                        break;
                    }
                    let t = grid.t(k);
                    let ms = flow.summary(s, k);
                    let x0 = flow.x0[s * (n + 1) + k];
                    let (_, _, _, ui) = minor_feedback(spec, &bmin, &flow.maps, k, t, xi, x0, ms.mean, None)?;
                    u[i * n + k] = ui;
                    xi = minor_step(spec, t, xi, ui, ms, dt, dw[k], dw0[k]);
                }
                if !xi.is_finite() {
                    return Err(MfgError::ModelEvaluation { function: "limit agents", tuple: format!("scenario {s}, agent {}", i + 1) });
                }
            }
            for (k, am) in agent_mean.iter_mut().enumerate() {
                *am = (0..na).map(|i| x[i * (n + 1) + k]).sum::<f64>() / na as f64;
            }
            let mean = (0..=n).map(|k| flow.summary(s, k).mean).collect();
            Ok((x, u, agent_mean, mean))
        })
        .collect::<Result<_>>()?;
    let ks = flow.n_replications;
    let mut out = LimitAgents {
        grid,
        n_agents: na,
        n_replications: ks,
        x0: flow.x0.clone(),
        x: Vec::with_capacity(ks * na * (n + 1)),
        controls: AgentControls {
            n_agents: na,
            n_replications: ks,
            n_steps: n,
            u0: flow.u0.clone(),
            u: Vec::with_capacity(ks * na * n),
        },
        mean: Vec::with_capacity(ks * (n + 1)),
        agent_mean: Vec::with_capacity(ks * (n + 1)),
        noise: noise_key(bundle, na),
    };
    for (x, u, am, mean) in parts {
        out.x.extend(x);
        out.controls.u.extend(u);
        out.agent_mean.extend(am);
        out.mean.extend(mean);
    }
    Ok(out)
}

/// Paths of the (N+1)-agent game under given controls.
#[derive(Debug, Clone)]
pub struct FiniteGameState {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub n_replications: usize,
    /// `s * (n + 1) + k`
    pub x0: Vec<f64>,
    /// `(s * N + i - 1) * (n + 1) + k`
    pub x: Vec<f64>,
    /// Controls actually applied.
    pub controls: AgentControls,
    /// Summaries of the empirical minor measure `m^N` at `s * (n + 1) + k`.
    pub summaries: Vec<MeasureSummary>,
    noise: u64,
}

impl FiniteGameState {
    pub fn state(&self, s: usize, i: usize, k: usize) -> f64 {
        let n1 = self.grid.n_steps() + 1;
        if i == 0 {
            self.x0[s * n1 + k]
        } else {
            self.x[(s * self.n_agents + i - 1) * n1 + k]
        }
    }

    pub fn summary(&self, s: usize, k: usize) -> &MeasureSummary {
        &self.summaries[s * (self.grid.n_steps() + 1) + k]
    }

    /// Largest absolute violation of the Euler identities when the stored
    /// states and controls are replayed on `bundle`.
    pub fn replay_residual(&self, spec: &ModelSpec, bundle: &PathBundle) -> Result<f64> {
        check_game_bundle(&self.grid, self.n_replications, self.n_agents, bundle)?;
        if noise_key(bundle, self.n_agents) != self.noise {
            return Err(MfgError::ShapeMismatch("bundle is not the one the game was simulated on".into()));
        }
        let (n, dt) = (self.grid.n_steps(), self.grid.dt());
        let mut worst = 0.0f64;
        for s in 0..self.n_replications {
            let dw0 = bundle.common(s);
            for k in 0..n {
                let t = self.grid.t(k);
                let states: Vec<f64> = (1..=self.n_agents).map(|i| self.state(s, i, k)).collect();
                let ms = spec.summarize(t, &states);
                let x0 = self.state(s, 0, k);
                let next = major_step(spec, t, x0, self.controls.get(s, 0, k), &ms, dt, dw0[k]);
                worst = worst.max((next - self.state(s, 0, k + 1)).abs());
                for i in 1..=self.n_agents {
                    let u = self.controls.get(s, i, k);
                    let next = minor_step(spec, t, states[i - 1], u, &ms, dt, bundle.idiosyncratic(s, i - 1)[k], dw0[k]);
                    worst = worst.max((next - self.state(s, i, k + 1)).abs());
                }
            }
        }
        Ok(worst)
    }
}

/// A unilateral deviation of one agent, others keeping their limit controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Deviation {
    /// `c * u`
    Scale(f64),
    /// `u + c`
    Shift(f64),
    /// Exact best response against the frozen limit controls of the others
    /// (linear-quadratic models only).
    BestResponse,
}

impl fmt::Display for Deviation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Deviation::Scale(c) => write!(f, "scale({c})"),
            Deviation::Shift(c) => write!(f, "shift({c})"),
            Deviation::BestResponse => write!(f, "best-response"),
        }
    }
}

/// `{0.5u, 1.5u, u +- 0.1, u +- 1, 0}`, plus the best response for LQ models.
pub fn default_family(spec: &ModelSpec) -> Vec<Deviation> {
    let mut v = vec![
        Deviation::Scale(0.5),
        Deviation::Scale(1.5),
        Deviation::Shift(0.1),
        Deviation::Shift(-0.1),
        Deviation::Shift(1.0),
        Deviation::Shift(-1.0),
        Deviation::Scale(0.0),
    ];
    if spec.lq.is_some() {
        v.push(Deviation::BestResponse);
    }
    v
}

/// Best-response feedback of one agent: the limit control minus
/// `gain (kx (X - Xbar) + alpha D + theta Dbar + zeta Delta0)`.
struct BestResponse<'a> {
    gain: f64,
    /// Control weight of the deviating agent.
    r: f64,
    kx: Vec<f64>,
    alpha: Vec<f64>,
    theta: Vec<f64>,
    zeta: Option<Vec<f64>>,
    limit: &'a LimitAgents,
}

impl BestResponse<'_> {
    fn new<'a>(spec: &ModelSpec, agent: usize, limit: &'a LimitAgents) -> Result<BestResponse<'a>> {
        let lq = spec
            .lq
            .as_ref()
            .ok_or_else(|| MfgError::OracleUnavailable(format!("{} is not linear-quadratic", spec.name)))?;
        let rs = solve_riccati(lq, &limit.grid)?;
        let c = best_response_correction(&rs);
        Ok(if agent == 0 {
            BestResponse {
                gain: lq.major.c / lq.major.r,
                r: lq.major.r,
                kx: rs.k0_hat,
                alpha: c.alpha0,
                theta: c.theta0,
                zeta: None,
                limit,
            }
        } else {
            BestResponse {
                gain: lq.minor.c / lq.minor.r,
                r: lq.minor.r,
                kx: rs.k,
                alpha: c.alpha,
                theta: c.theta,
                zeta: Some(c.zeta),
                limit,
            }
        })
    }

    /// `u_limit - u_best` at a finite-game point.
    #[inline]
    fn offset(&self, s: usize, agent: usize, k: usize, x: f64, x0_game: f64, mean_game: f64) -> f64 {
        let l = self.limit;
        let j = s * (l.grid.n_steps() + 1) + k;
        let mbar = l.mean[j];
        let mut z = self.kx[k] * (x - l.state(s, agent, k))
            + self.alpha[k] * (mean_game - mbar)
            + self.theta[k] * (l.agent_mean[j] - mbar);
        if let Some(zeta) = &self.zeta {
            z += zeta[k] * (x0_game - l.x0[j]);
        }
        self.gain * z
    }
}

enum Rule<'a> {
    Scale(f64),
    Shift(f64),
    Best(&'a BestResponse<'a>),
}

/// Euler integration of the game; `dev` replaces one agent's control.
fn run_game(
    spec: &ModelSpec,
    controls: &AgentControls,
    bundle: &PathBundle,
    grid: TimeGrid,
    dev: Option<(usize, Rule)>,
) -> Result<FiniteGameState> {
    controls.check()?;
    let (na, ks) = (controls.n_agents, controls.n_replications);
    check_game_bundle(&grid, ks, na, bundle)?;
    if controls.n_steps != grid.n_steps() {
        return Err(MfgError::ShapeMismatch("controls and grid differ in steps".into()));
    }
    let (n, dt) = (grid.n_steps(), grid.dt());
    type Part = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<MeasureSummary>);
    let parts: Vec<Part> = (0..ks)
        .into_par_iter()
        .map(|s| -> Result<Part> {
            let dw0 = bundle.common(s);
            let mut x0 = bundle.xi0[s];
            let mut xs: Vec<f64> = (0..na).map(|j| bundle.xi(s, j)).collect();
            let mut x0_path = Vec::with_capacity(n + 1);
            let mut x_path = vec![0.0; na * (n + 1)];
            let mut u0_path = controls.u0[s * n..(s + 1) * n].to_vec();
            let mut u_path = controls.u[s * na * n..(s + 1) * na * n].to_vec();
            let mut sums = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let t = grid.t(k);
                let ms = spec.summarize(t, &xs);
                x0_path.push(x0);
                for (i, &x) in xs.iter().enumerate() {
                    x_path[i * (n + 1) + k] = x;
                }
                if k < n {
                    if let Some((agent, rule)) = &dev {
                        let u = if *agent == 0 { &mut u0_path[k] } else { &mut u_path[(agent - 1) * n + k] };
                        *u = match rule {
                            Rule::Scale(c) => c * *u,
                            Rule::Shift(c) => *u + c,
                            Rule::Best(br) => {
                                let x = if *agent == 0 { x0 } else { xs[agent - 1] };
                                *u - br.offset(s, *agent, k, x, x0, ms.mean)
                            }
                        };
                    }
                    let u0 = u0_path[k];
                    for (i, x) in xs.iter_mut().enumerate() {
                        *x = minor_step(spec, t, *x, u_path[i * n + k], &ms, dt, bundle.idiosyncratic(s, i)[k], dw0[k]);
                    }
                    x0 = major_step(spec, t, x0, u0, &ms, dt, dw0[k]);
                    if !x0.is_finite() || !xs.iter().all(|v| v.is_finite()) {
                        return Err(MfgError::ModelEvaluation { function: "finite game", tuple: format!("scenario {s}, step {k}") });
                    }
                }
                sums.push(ms);
            }
            Ok((x0_path, x_path, u0_path, u_path, sums))
        })
        .collect::<Result<_>>()?;
    let mut out = FiniteGameState {
        grid,
        n_agents: na,
        n_replications: ks,
        x0: Vec::with_capacity(ks * (n + 1)),
        x: Vec::with_capacity(ks * na * (n + 1)),
        controls: AgentControls {
            n_agents: na,
            n_replications: ks,
            n_steps: n,
            u0: Vec::with_capacity(ks * n),
            u: Vec::with_capacity(ks * na * n),
        },
        summaries: Vec::with_capacity(ks * (n + 1)),
        noise: noise_key(bundle, na),
    };
    for (x0, x, u0, u, sums) in parts {
        out.x0.extend(x0);
        out.x.extend(x);
        out.controls.u0.extend(u0);
        out.controls.u.extend(u);
        out.summaries.extend(sums);
    }
    Ok(out)
}

/// Simulates the game with `n_agents` minors under open-loop `controls`, on
/// the first `n_agents` idiosyncratic paths of `bundle`.
pub fn simulate_finite_game(
    spec: &ModelSpec,
    controls: &AgentControls,
    bundle: &PathBundle,
    n_agents: usize,
) -> Result<FiniteGameState> {
    if n_agents == 0 {
        return Err(MfgError::InvalidArgument("the game needs at least one minor agent".into()));
    }
    if controls.n_agents != n_agents {
        return Err(MfgError::SizeMismatch { left: controls.n_agents, right: n_agents });
    }
    run_game(spec, controls, bundle, bundle.grid, None)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosGap {
    /// `sup_k max(E|X0^N - X0bar|^2, E|X^{i,N} - Xbar^i|^2)`
    pub value: f64,
    pub stderr: f64,
    /// Knot attaining the sup.
    pub step: usize,
    /// Major part of the sup.
    pub major: f64,
    /// Minor part of the sup.
    pub minor: f64,
}

/// Sup over knots of the mean squared distance between finite-game and
/// limit states. Minors are exchangeable, so their expectation is estimated
/// by pooling all agents; the major is kept separate.
pub fn chaos_gap(limit: &LimitAgents, game: &FiniteGameState) -> Result<ChaosGap> {
    if limit.noise != game.noise
        || limit.grid != game.grid
        || limit.n_agents != game.n_agents
        || limit.n_replications != game.n_replications
    {
        return Err(MfgError::ShapeMismatch("limit and game paths are not paired".into()));
    }
    let (ks, na, n) = (limit.n_replications, limit.n_agents, limit.grid.n_steps());
    let mut best = ChaosGap { value: 0.0, stderr: 0.0, step: 0, major: 0.0, minor: 0.0 };
    let mut maj = vec![0.0; ks];
    let mut min = vec![0.0; ks];
    let mut major_sup = 0.0f64;
    let mut minor_sup = 0.0f64;
    for k in 0..=n {
        for s in 0..ks {
            maj[s] = (game.state(s, 0, k) - limit.state(s, 0, k)).powi(2);
            min[s] = (1..=na).map(|i| (game.state(s, i, k) - limit.state(s, i, k)).powi(2)).sum::<f64>() / na as f64;
        }
        let (m0, se0) = mean_se(&maj);
        let (m1, se1) = mean_se(&min);
        major_sup = major_sup.max(m0);
        minor_sup = minor_sup.max(m1);
        let (v, se) = if m0 >= m1 { (m0, se0) } else { (m1, se1) };
        if v > best.value {
            best.value = v;
            best.stderr = se;
            best.step = k;
        }
    }
    best.major = major_sup;
    best.minor = minor_sup;
    Ok(best)
}

/// Realized cost of agent `i` in each replication.
fn costs(spec: &ModelSpec, i: usize, game: &FiniteGameState, n_rep: usize) -> Result<Vec<f64>> {
    if i > game.n_agents {
        return Err(MfgError::InvalidArgument(format!("agent {i} out of 0..={}", game.n_agents)));
    }
    if n_rep == 0 || n_rep > game.n_replications {
        return Err(MfgError::InvalidArgument(format!(
            "{n_rep} replications requested, game has {}",
            game.n_replications
        )));
    }
    let (n, dt) = (game.grid.n_steps(), game.grid.dt());
    let mut out = Vec::with_capacity(n_rep);
    for s in 0..n_rep {
        let mut j = 0.0;
        for k in 0..n {
            let t = game.grid.t(k);
            let ms = game.summary(s, k);
            let x = game.state(s, i, k);
            let u = game.controls.get(s, i, k);
            j += dt * if i == 0 {
                (spec.major_cost.f0)(t, x, u, &ms.moments)
            } else {
                spec.minor_cost.f(t, x, u, &ms.moments, game.state(s, 0, k))
            };
        }
        let ms = game.summary(s, n);
        let x = game.state(s, i, n);
        j += if i == 0 {
            (spec.major_cost.g0)(x, &ms.moments)
        } else {
            (spec.minor_cost.g)(x, &ms.moments, game.state(s, 0, n))
        };
        if !j.is_finite() {
            return Err(MfgError::ModelEvaluation { function: "cost", tuple: format!("agent {i}, replication {s}") });
        }
        out.push(j);
    }
    Ok(out)
}

/// Mean realized cost of agent `i` over the first `n_rep` replications, with
/// its standard error. Measure arguments are the empirical minor measure,
/// agent `i` included.
pub fn estimate_cost(spec: &ModelSpec, i: usize, game: &FiniteGameState, n_rep: usize) -> Result<(f64, f64)> {
    Ok(mean_se(&costs(spec, i, game, n_rep)?))
}

/// How the best-response member of a family is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapEstimator {
    /// Completion of squares along the limit-control run:
    /// `E sum dt r/2 (u_limit - u_best)^2`.
    Regret,
    /// Paired difference of realized costs.
    Direct,
}

/// Outcome of one deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberGap {
    pub deviation: Deviation,
    /// `J(u) - J(dev)` over paired replications.
    pub diff: f64,
    pub diff_stderr: f64,
    /// Regret-identity estimate, best response only.
    pub regret: Option<(f64, f64)>,
}

/// `max(0, J(u) - min_dev J(dev))` with its standard error. A finite family
/// gives a lower bound on the true gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Index of the member attaining the max, `None` if no member improves.
    pub argmax: Option<usize>,
    pub members: Vec<MemberGap>,
}

fn gap_with(
    spec: &ModelSpec,
    limit: &LimitAgents,
    base: &FiniteGameState,
    bundle: &PathBundle,
    agent: usize,
    family: &[Deviation],
    estimator: GapEstimator,
) -> Result<GapEstimate> {
    if family.is_empty() {
        return Err(MfgError::EmptyFamily);
    }
    if agent > limit.n_agents {
        return Err(MfgError::InvalidArgument(format!("agent {agent} out of 0..={}", limit.n_agents)));
    }
    let ks = base.n_replications;
    let j_base = costs(spec, agent, base, ks)?;
    let br = if family.contains(&Deviation::BestResponse) { Some(BestResponse::new(spec, agent, limit)?) } else { None };
    let mut members = Vec::with_capacity(family.len());
    for dev in family {
        let rule = match dev {
            Deviation::Scale(c) => Rule::Scale(*c),
            Deviation::Shift(c) => Rule::Shift(*c),
            Deviation::BestResponse => Rule::Best(br.as_ref().expect("built above")),
        };
        let game = run_game(spec, &limit.controls, bundle, limit.grid, Some((agent, rule)))?;
        let j_dev = costs(spec, agent, &game, ks)?;
        let d: Vec<f64> = j_base.iter().zip(&j_dev).map(|(a, b)| a - b).collect();
        let (diff, diff_stderr) = mean_se(&d);
        let regret = match (dev, &br) {
            (Deviation::BestResponse, Some(br)) => Some(mean_se(&regret_per_rep(br, base, agent))),
            _ => None,
        };
        members.push(MemberGap { deviation: *dev, diff, diff_stderr, regret });
    }
    let mut out = GapEstimate { value: 0.0, stderr: 0.0, argmax: None, members };
    for (idx, m) in out.members.iter().enumerate() {
        let (v, se) = match (estimator, m.regret) {
            (GapEstimator::Regret, Some(r)) => r,
            _ => (m.diff, m.diff_stderr),
        };
        if v > out.value {
            out.value = v;
            out.stderr = se;
            out.argmax = Some(idx);
        }
    }
    Ok(out)
}

/// `sum_k dt r/2 (u_limit - u_best)^2` along the limit-control game.
fn regret_per_rep(br: &BestResponse, base: &FiniteGameState, agent: usize) -> Vec<f64> {
    let (n, dt) = (base.grid.n_steps(), base.grid.dt());
    (0..base.n_replications)
        .map(|s| {
            (0..n)
                .map(|k| {
                    let x = base.state(s, agent, k);
                    let off = br.offset(s, agent, k, x, base.state(s, 0, k), base.summary(s, k).mean);
                    0.5 * br.r * off * off * dt
                })
                .sum()
        })
        .collect()
}

/// Estimated epsilon-Nash gap of agent `i` (0 = major) in the game with
/// `n_agents` minors on `bundle`, others frozen at their limit controls.
pub fn deviation_gap(
    spec: &ModelSpec,
    flow: &LimitFlow,
    i: usize,
    family: &[Deviation],
    n_agents: usize,
    bundle: &PathBundle,
) -> Result<GapEstimate> {
    if family.is_empty() {
        return Err(MfgError::EmptyFamily);
    }
    let limit = simulate_limit_agents(flow, spec, n_agents, bundle)?;
    let base = simulate_finite_game(spec, &limit.controls, bundle, n_agents)?;
    gap_with(spec, &limit, &base, bundle, i, family, GapEstimator::Regret)
}

/// Least-squares line through `(ln N, ln value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// 95% interval for the slope.
    pub slope_ci: (f64, f64),
    pub intercept_ci: (f64, f64),
}

/// Two-sided 95% Student-t quantile.
fn t95(dof: usize) -> f64 {
    const T: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match dof {
        0 => f64::INFINITY,
        d if d <= 30 => T[d - 1],
        _ => 1.96,
    }
}

/// Fits `ln y = a + b ln x`. `None` when fewer than two points or any value
/// is not positive (the all-zero case included).
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 2 || ys.iter().any(|&y| !(y > 0.0) || !y.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = lx.len() - 2;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = if dof > 0 { sse / dof as f64 } else { f64::NAN };
    let slope_stderr = (s2 / sxx).sqrt();
    let int_stderr = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
    let t = t95(dof);
    Some(LogLogFit {
        slope,
        intercept,
        slope_stderr,
        slope_ci: (slope - t * slope_stderr, slope + t * slope_stderr),
        intercept_ci: (intercept - t * int_stderr, intercept + t * int_stderr),
    })
}

/// Settings of a scaling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashConfig {
    /// Common-noise scenarios, one game each.
    pub n_replications: usize,
    /// Particles per scenario for the limit flow.
    pub limit_particles: usize,
    pub seed: u64,
    /// Index of the game population drawn on each scenario.
    pub game: u64,
    /// Minor agent whose gap is reported.
    pub minor_agent: usize,
    /// `None` means [`default_family`].
    pub family: Option<Vec<Deviation>>,
    pub estimator: GapEstimator,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            n_replications: 64,
            limit_particles: 8192,
            seed: 0,
            game: 0,
            minor_agent: 1,
            family: None,
            estimator: GapEstimator::Regret,
        }
    }
}

/// Per-N estimates and their log-log fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub ns: Vec<usize>,
    pub chaos: Vec<ChaosGap>,
    pub gap_major: Vec<GapEstimate>,
    pub gap_minor: Vec<GapEstimate>,
    pub chaos_fit: Option<LogLogFit>,
    pub major_fit: Option<LogLogFit>,
    pub minor_fit: Option<LogLogFit>,
    pub minor_agent: usize,
    pub n_replications: usize,
    /// Set when a per-N run failed; the vectors hold the completed prefix.
    pub failure: Option<String>,
}

impl NashReport {
    fn fit(&mut self) {
        let ns: Vec<f64> = self.ns.iter().map(|&n| n as f64).collect();
        let ns = &ns[..self.chaos.len()];
        if ns.len() < 3 {
            return;
        }
        self.chaos_fit = fit_loglog(ns, &self.chaos.iter().map(|c| c.value).collect::<Vec<_>>());
        self.major_fit = fit_loglog(ns, &self.gap_major.iter().map(|g| g.value).collect::<Vec<_>>());
        self.minor_fit = fit_loglog(ns, &self.gap_minor.iter().map(|g| g.value).collect::<Vec<_>>());
    }

    /// `N,chaos_gap,chaos_stderr,gap_major,gap_major_stderr,gap_minor,gap_minor_stderr`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(schema_line("nash").as_bytes())?;
        writeln!(w, "N,chaos_gap,chaos_stderr,gap_major,gap_major_stderr,gap_minor,gap_minor_stderr")?;
        for (idx, c) in self.chaos.iter().enumerate() {
            let (a, b) = (&self.gap_major[idx], &self.gap_minor[idx]);
            writeln!(w, "{},{},{},{},{},{},{}", self.ns[idx], c.value, c.stderr, a.value, a.stderr, b.value, b.stderr)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `series,N,log_n,log_value,log_fitted`; fitted values are empty for a
    /// series without a fit.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(schema_line("nash-plot").as_bytes())?;
        writeln!(w, "series,N,log_n,log_value,log_fitted")?;
        let series: [(&str, Vec<f64>, Option<LogLogFit>); 3] = [
            ("chaos_gap", self.chaos.iter().map(|c| c.value).collect(), self.chaos_fit),
            ("gap_major", self.gap_major.iter().map(|g| g.value).collect(), self.major_fit),
            ("gap_minor", self.gap_minor.iter().map(|g| g.value).collect(), self.minor_fit),
        ];
        for (name, vals, fit) in &series {
            for (n, v) in self.ns.iter().zip(vals) {
                let ln = (*n as f64).ln();
                let fitted = fit.map(|f| (f.intercept + f.slope * ln).to_string()).unwrap_or_default();
                writeln!(w, "{name},{n},{ln},{},{fitted}", v.ln())?;
            }
        }
        for (name, _, fit) in &series {
            if let Some(f) = fit {
                writeln!(w, "# {name}: slope {} [{}, {}], intercept {}", f.slope, f.slope_ci.0, f.slope_ci.1, f.intercept)?;
            } else {
                writeln!(w, "# {name}: degenerate, no fit")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (N, agent, deviation): paired cost difference and, for
    /// the best response, the regret estimate (empty otherwise).
    pub fn write_members_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(schema_line("nash-members").as_bytes())?;
        writeln!(w, "N,agent,deviation,diff,diff_stderr,regret,regret_stderr")?;
        for (idx, n) in self.ns.iter().take(self.chaos.len()).enumerate() {
            for (agent, g) in [(0, &self.gap_major[idx]), (self.minor_agent, &self.gap_minor[idx])] {
                for m in &g.members {
                    let (r, rs) = m.regret.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
                    writeln!(w, "{n},{agent},{},{},{},{r},{rs}", m.deviation, m.diff, m.diff_stderr)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the finite-game pipeline for each `N` in `ns` (sorted) and fits the
/// log-log slopes. All `N` share the limit flow, the common noises and the
/// leading agents' idiosyncratic noises.
pub fn scaling_report(spec: &ModelSpec, field: &SolutionField, ns: &[usize], cfg: &NashConfig) -> Result<NashReport> {
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(MfgError::InvalidArgument(format!("need at least 3 distinct agent counts, got {}", ns.len())));
    }
    if ns[0] == 0 {
        return Err(MfgError::InvalidArgument("agent counts must be positive".into()));
    }
    if cfg.minor_agent == 0 || cfg.minor_agent > ns[0] {
        return Err(MfgError::InvalidArgument(format!("minor agent must lie in 1..={}", ns[0])));
    }
    let family = cfg.family.clone().unwrap_or_else(|| default_family(spec));
    if family.is_empty() {
        return Err(MfgError::EmptyFamily);
    }
    let grid = field.grid;
    let ks = cfg.n_replications;
    let flow = {
        let cloud = PathBundle::sample(grid, ks, cfg.limit_particles, spec.init_major, spec.init_minor, cfg.seed, Population::Solver)?;
        LimitFlow::simulate(spec, &field.maps, &cloud)?
    };
    let n_max = *ns.last().expect("nonempty");
    let bundle = PathBundle::sample(grid, ks, n_max, spec.init_major, spec.init_minor, cfg.seed, Population::Game(cfg.game))?;
    let mut report = NashReport {
        ns: ns.clone(),
        chaos: Vec::new(),
        gap_major: Vec::new(),
        gap_minor: Vec::new(),
        chaos_fit: None,
        major_fit: None,
        minor_fit: None,
        minor_agent: cfg.minor_agent,
        n_replications: ks,
        failure: None,
    };
    for &n in &ns {
        let step = || -> Result<(ChaosGap, GapEstimate, GapEstimate)> {
            let limit = simulate_limit_agents(&flow, spec, n, &bundle)?;
            let base = simulate_finite_game(spec, &limit.controls, &bundle, n)?;
            let chaos = chaos_gap(&limit, &base)?;
            let major = gap_with(spec, &limit, &base, &bundle, 0, &family, cfg.estimator)?;
            let minor = gap_with(spec, &limit, &base, &bundle, cfg.minor_agent, &family, cfg.estimator)?;
            Ok((chaos, major, minor))
        };
        match step() {
            Ok((c, a, b)) => {
                report.chaos.push(c);
                report.gap_major.push(a);
                report.gap_minor.push(b);
            }
            Err(e) => {
                report.failure = Some(format!("N = {n}: {e}"));
                break;
            }
        }
    }
    report.fit();
    Ok(report)
}


#[cfg(test)]
mod tests;

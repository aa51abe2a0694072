//! Forward and backward sweeps shared by every solver.

use rayon::prelude::*;

use super::{
    Diagnostics, FeedbackMaps, InputField, MajorPath, MajorPaths, MeasureFlow, MinorPaths,
    SolutionField, SolverConfig,
};
use crate::error::{MfgError, Result};
use crate::hamiltonian::{
    minimize_major, minimize_major_with_slope, minimize_minor, minimize_minor_with_slope, MajorAdjoint, MinorAdjoint,
};
use crate::model::{coupling_budget, Coef, MeasureSummary, ModelSpec};
use crate::regression::{nodes_for_degree, NormalEquations, PolyBasis};
use crate::stochastics::PathBundle;

use super::BackwardScheme;

/// Which blocks of the system are being solved.
#[derive(Clone, Copy)]
pub(crate) enum Mode<'a> {
    Coupled,
    MajorOnly,
    MinorOnly(&'a MajorPath),
}

impl Mode<'_> {
    fn major(&self) -> bool {
        !matches!(self, Mode::MinorOnly(_))
    }

    fn minor(&self) -> bool {
        !matches!(self, Mode::MajorOnly)
    }
}

#[derive(Clone, Copy)]
pub(crate) enum FlowSource<'a> {
    Frozen(&'a MeasureFlow),
    /// Summaries taken from the particles being simulated.
    SelfConsistent,
}

pub(crate) struct Ctx<'a> {
    pub spec: &'a ModelSpec,
    pub bundle: &'a PathBundle,
    pub gamma: f64,
    pub inputs: Option<&'a InputField>,
    pub scheme: BackwardScheme,
    pub bmaj: PolyBasis,
    pub bmin: PolyBasis,
    pub nodes: Vec<(f64, f64)>,
    /// `(slope_x, slope_u)` of every coefficient at every knot.
    slopes: Vec<[(f64, f64); 5]>,
    pub n: usize,
    pub ks: usize,
    pub m: usize,
    pub dt: f64,
}

impl<'a> Ctx<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        bundle: &'a PathBundle,
        degree: usize,
        scheme: BackwardScheme,
        gamma: f64,
        inputs: Option<&'a InputField>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(MfgError::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if (bundle.grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
            return Err(MfgError::ShapeMismatch(format!(
                "bundle horizon {} differs from model horizon {}",
                bundle.grid.horizon(),
                spec.horizon
            )));
        }
        let n = bundle.n_steps();
        if let Some(inp) = inputs {
            inp.check(n, bundle.n_scenarios, bundle.n_particles)?;
        }
        Ok(Self {
            spec,
            bundle,
            gamma,
            inputs,
            scheme,
            bmaj: PolyBasis::new(2, degree),
            bmin: PolyBasis::new(3, degree),
            nodes: nodes_for_degree(degree)?,
            slopes: (0..=n)
                .map(|k| {
                    let t = bundle.grid.t(k);
                    std::array::from_fn(|c| (spec.slope_x(Coef::ALL[c], t), spec.slope_u(Coef::ALL[c], t)))
                })
                .collect(),
            n,
            ks: bundle.n_scenarios,
            m: bundle.n_particles,
            dt: bundle.grid.dt(),
        })
    }

    #[inline]
    fn t(&self, k: usize) -> f64 {
        self.bundle.grid.t(k)
    }

    #[inline]
    fn inp_major(&self, s: usize, k: usize) -> [f64; 3] {
        match self.inputs {
            Some(i) => {
                let idx = s * (self.n + 1) + k;
                [i.b0[idx], i.sigma0[idx], i.f0[idx]]
            }
            None => [0.0; 3],
        }
    }

    #[inline]
    fn inp_minor(&self, s: usize, j: usize, k: usize) -> [f64; 4] {
        match self.inputs {
            Some(i) => {
                let idx = (s * self.m + j) * (self.n + 1) + k;
                [i.b[idx], i.sigma[idx], i.sigma_tilde[idx], i.f[idx]]
            }
            None => [0.0; 4],
        }
    }

    fn inp_g0(&self, s: usize) -> f64 {
        self.inputs.map_or(0.0, |i| i.g0[s])
    }

    fn inp_g(&self, s: usize, j: usize) -> f64 {
        self.inputs.map_or(0.0, |i| i.g[s * self.m + j])
    }

    fn major_feedback(
        &self,
        maps: &FeedbackMaps,
        k: usize,
        x0: f64,
        ms: &MeasureSummary,
        terminal_p0: Option<f64>,
    ) -> Result<(f64, f64, f64)> {
        let z = [x0, ms.mean];
        let p0 = terminal_p0.unwrap_or_else(|| self.bmaj.predict(&maps.major_p[k], &z));
        let q0 = self.bmaj.predict(&maps.major_q[k], &z);
        let sl = &self.slopes[k];
        let slope = sl[Coef::MajorDrift as usize].1 * p0 + sl[Coef::MajorVol as usize].1 * q0;
        let u0 = minimize_major_with_slope(self.t(k), x0, slope, ms, self.spec)?;
        Ok((p0, q0, u0))
    }

    fn minor_feedback(
        &self,
        maps: &FeedbackMaps,
        k: usize,
        x: f64,
        x0: f64,
        mean: f64,
        terminal_p: Option<f64>,
    ) -> Result<(f64, f64, f64, f64)> {
        let z = [x, x0, mean];
        let p = terminal_p.unwrap_or_else(|| self.bmin.predict(&maps.minor_p[k], &z));
        let q = self.bmin.predict(&maps.minor_q[k], &z);
        let qt = self.bmin.predict(&maps.minor_q_tilde[k], &z);
        let sl = &self.slopes[k];
        let slope = sl[Coef::MinorDrift as usize].1 * p
            + sl[Coef::MinorVol as usize].1 * q
            + sl[Coef::MinorCommonVol as usize].1 * qt;
        let u = minimize_minor_with_slope(self.t(k), x, slope, x0, self.spec)?;
        Ok((p, q, qt, u))
    }

    #[inline]
    fn coef(&self, c: Coef, k: usize, x: f64, u: f64, ms: &MeasureSummary) -> f64 {
        let (sx, su) = self.slopes[k][c as usize];
        ms.intercepts[c as usize] + sx * x + su * u
    }

    /// `(drift, vol)` of the major at a stored tuple.
    #[inline]
    fn major_coefs(&self, s: usize, k: usize, x0: f64, u0: f64, ms: &MeasureSummary) -> (f64, f64) {
        let [ib, is, _] = self.inp_major(s, k);
        let g = self.gamma;
        (g * self.coef(Coef::MajorDrift, k, x0, u0, ms) + ib, g * self.coef(Coef::MajorVol, k, x0, u0, ms) + is)
    }

    /// `(drift, vol, common vol)` of a minor at a stored tuple.
    #[inline]
    fn minor_coefs(&self, s: usize, j: usize, k: usize, x: f64, u: f64, ms: &MeasureSummary) -> (f64, f64, f64) {
        let [ib, is, ist, _] = self.inp_minor(s, j, k);
        let g = self.gamma;
        (
            g * self.coef(Coef::MinorDrift, k, x, u, ms) + ib,
            g * self.coef(Coef::MinorVol, k, x, u, ms) + is,
            g * self.coef(Coef::MinorCommonVol, k, x, u, ms) + ist,
        )
    }
}

/// Major feedback at one point: `(p0, q0, u0)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn major_feedback(
    spec: &ModelSpec,
    basis: &PolyBasis,
    maps: &FeedbackMaps,
    k: usize,
    t: f64,
    x0: f64,
    ms: &MeasureSummary,
    terminal_p0: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let z = [x0, ms.mean];
    let p0 = terminal_p0.unwrap_or_else(|| basis.predict(&maps.major_p[k], &z));
    let q0 = basis.predict(&maps.major_q[k], &z);
    let u0 = minimize_major(t, x0, MajorAdjoint { p0, q0 }, ms, spec)?;
    Ok((p0, q0, u0))
}

/// Minor feedback at one point: `(p, q, q~, u)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minor_feedback(
    spec: &ModelSpec,
    basis: &PolyBasis,
    maps: &FeedbackMaps,
    k: usize,
    t: f64,
    x: f64,
    x0: f64,
    mean: f64,
    terminal_p: Option<f64>,
) -> Result<(f64, f64, f64, f64)> {
    let z = [x, x0, mean];
    let p = terminal_p.unwrap_or_else(|| basis.predict(&maps.minor_p[k], &z));
    let q = basis.predict(&maps.minor_q[k], &z);
    let qt = basis.predict(&maps.minor_q_tilde[k], &z);
    let u = minimize_minor(t, x, MinorAdjoint { p, q, q_tilde: qt }, x0, spec)?;
    Ok((p, q, qt, u))
}

/// Value of the major feedback maps of `field` at knot `k`: `(p0, q0, u0)`.
pub fn evaluate_major_feedback(
    spec: &ModelSpec,
    maps: &FeedbackMaps,
    grid: &crate::stochastics::TimeGrid,
    k: usize,
    x0: f64,
    ms: &MeasureSummary,
) -> Result<(f64, f64, f64)> {
    let basis = PolyBasis::new(2, maps.degree);
    major_feedback(spec, &basis, maps, k, grid.t(k), x0, ms, None)
}

/// Value of the minor feedback maps at knot `k`: `(p, q, q~, u)`.
pub fn evaluate_minor_feedback(
    spec: &ModelSpec,
    maps: &FeedbackMaps,
    grid: &crate::stochastics::TimeGrid,
    k: usize,
    x: f64,
    x0: f64,
    mean: f64,
) -> Result<(f64, f64, f64, f64)> {
    let basis = PolyBasis::new(3, maps.degree);
    minor_feedback(spec, &basis, maps, k, grid.t(k), x, x0, mean, None)
}

/// Result of one forward sweep.
pub(crate) struct Forward {
    pub major: MajorPaths,
    pub minor: MinorPaths,
    /// Flow built from the simulated particles (always populated when minors
    /// are simulated).
    pub particles: Vec<f64>,
    pub mean_drift: Vec<f64>,
    pub mean_vol0: Vec<f64>,
    /// Summaries of the simulated particles (self-consistent runs only).
    pub summaries: Option<Vec<MeasureSummary>>,
}

struct ScenarioForward {
    x0: Vec<f64>,
    p0: Vec<f64>,
    q0: Vec<f64>,
    u0: Vec<f64>,
    x: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    qt: Vec<f64>,
    u: Vec<f64>,
    particles: Vec<f64>,
    mean_drift: Vec<f64>,
    mean_vol0: Vec<f64>,
    summaries: Vec<MeasureSummary>,
}

fn forward_scenario(ctx: &Ctx, mode: Mode, maps: &FeedbackMaps, flow: FlowSource, s: usize) -> Result<ScenarioForward> {
    let (n, m, dt) = (ctx.n, ctx.m, ctx.dt);
    let spec = ctx.spec;
    let (do_major, do_minor) = (mode.major(), mode.minor());
    let len_major = if do_major { n + 1 } else { 0 };
    let len_minor = if do_minor { m * (n + 1) } else { 0 };
    let mut out = ScenarioForward {
        x0: vec![0.0; len_major],
        p0: vec![0.0; len_major],
        q0: vec![0.0; len_major],
        u0: vec![0.0; len_major],
        x: vec![0.0; len_minor],
        p: vec![0.0; len_minor],
        q: vec![0.0; len_minor],
        qt: vec![0.0; len_minor],
        u: vec![0.0; len_minor],
        particles: vec![0.0; len_minor],
        mean_drift: vec![0.0; if do_minor { n + 1 } else { 0 }],
        mean_vol0: vec![0.0; if do_minor { n + 1 } else { 0 }],
        summaries: Vec::new(),
    };
    let dw0 = ctx.bundle.common(s);
    let mut x0 = match mode {
        Mode::MinorOnly(path) => path.x0[s * (n + 1)],
        _ => ctx.bundle.xi0[s],
    };
    let mut xs: Vec<f64> = if do_minor { (0..m).map(|j| ctx.bundle.xi(s, j)).collect() } else { Vec::new() };
    let g = ctx.gamma;
    for k in 0..=n {
        let t = ctx.t(k);
        let own;
        let ms: &MeasureSummary = match flow {
            FlowSource::Frozen(f) => f.summary(s, k),
            FlowSource::SelfConsistent => {
                own = spec.summarize(t, &xs);
                &own
            }
        };
        if let Mode::MinorOnly(path) = mode {
            x0 = path.x0[s * (n + 1) + k];
        }
        let mut x0_next = x0;
        if do_major {
            let terminal = (k == n).then(|| g * (spec.major_cost.g0_x)(x0, &ms.moments) + ctx.inp_g0(s));
            let (p0, q0, u0) = ctx.major_feedback(maps, k, x0, ms, terminal)?;
            if !(x0.is_finite() && p0.is_finite() && q0.is_finite()) {
                return Err(MfgError::ModelEvaluation {
                    function: "major forward sweep",
                    tuple: format!("scenario {s}, step {k}: x0={x0}, p0={p0}, q0={q0}"),
                });
            }
            out.x0[k] = x0;
            out.p0[k] = p0;
            out.q0[k] = q0;
            out.u0[k] = u0;
            if k < n {
                let (drift, vol) = ctx.major_coefs(s, k, x0, u0, ms);
                x0_next = x0 + drift * dt + vol * dw0[k];
            }
        }
        if do_minor {
            let mut sum_drift = 0.0;
            let mut sum_vol0 = 0.0;
            for (j, xj) in xs.iter_mut().enumerate() {
                let x = *xj;
                let terminal = (k == n).then(|| g * (spec.minor_cost.g_x)(x, &ms.moments, x0) + ctx.inp_g(s, j));
                let (p, q, qt, u) = ctx.minor_feedback(maps, k, x, x0, ms.mean, terminal)?;
                let i = j * (n + 1) + k;
                out.x[i] = x;
                out.p[i] = p;
                out.q[i] = q;
                out.qt[i] = qt;
                out.u[i] = u;
                out.particles[k * m + j] = x;
                if k < n {
                    let (drift, vol, vol0) = ctx.minor_coefs(s, j, k, x, u, ms);
                    sum_drift += drift;
                    sum_vol0 += vol0;
                    *xj = x + drift * dt + vol * ctx.bundle.idiosyncratic(s, j)[k] + vol0 * dw0[k];
                }
            }
            if k < n {
                out.mean_drift[k] = sum_drift / m as f64;
                out.mean_vol0[k] = sum_vol0 / m as f64;
            }
            if !xs.iter().all(|v| v.is_finite()) {
                return Err(MfgError::ModelEvaluation {
                    function: "minor forward sweep",
                    tuple: format!("scenario {s}, step {k}"),
                });
            }
        }
        if let FlowSource::SelfConsistent = flow {
            out.summaries.push(ms.clone());
        }
        x0 = x0_next;
    }
    Ok(out)
}

pub(crate) fn forward(ctx: &Ctx, mode: Mode, maps: &FeedbackMaps, flow: FlowSource) -> Result<Forward> {
    let parts: Vec<ScenarioForward> =
        (0..ctx.ks).into_par_iter().map(|s| forward_scenario(ctx, mode, maps, flow, s)).collect::<Result<_>>()?;
    let (n, ks) = (ctx.n, ctx.ks);
    let cat = |f: &dyn Fn(&ScenarioForward) -> &Vec<f64>| -> Vec<f64> {
        let mut v = Vec::with_capacity(parts.iter().map(|p| f(p).len()).sum());
        for p in &parts {
            v.extend_from_slice(f(p));
        }
        v
    };
    let major = if mode.major() {
        MajorPaths { x0: cat(&|p| &p.x0), p0: cat(&|p| &p.p0), q0: cat(&|p| &p.q0), u0: cat(&|p| &p.u0) }
    } else {
        MajorPaths::default()
    };
    let minor = if mode.minor() {
        MinorPaths { x: cat(&|p| &p.x), p: cat(&|p| &p.p), q: cat(&|p| &p.q), q_tilde: cat(&|p| &p.qt), u: cat(&|p| &p.u) }
    } else {
        MinorPaths::default()
    };
    let summaries = matches!(flow, FlowSource::SelfConsistent).then(|| {
        let mut v = Vec::with_capacity(ks * (n + 1));
        for p in &parts {
            v.extend(p.summaries.iter().cloned());
        }
        v
    });
    Ok(Forward {
        major,
        minor,
        particles: cat(&|p| &p.particles),
        mean_drift: cat(&|p| &p.mean_drift),
        mean_vol0: cat(&|p| &p.mean_vol0),
        summaries,
    })
}

/// Flow made of the particles of a forward sweep.
pub(crate) fn flow_from_forward(ctx: &Ctx, fwd: &Forward) -> MeasureFlow {
    let (n, m) = (ctx.n, ctx.m);
    let summaries = match &fwd.summaries {
        Some(s) => s.clone(),
        None => summarize_all(ctx.spec, ctx, &fwd.particles),
    };
    MeasureFlow {
        n_scenarios: ctx.ks,
        n_particles: m,
        n_steps: n,
        particles: fwd.particles.clone(),
        summaries,
        mean_drift: fwd.mean_drift.clone(),
        mean_vol0: fwd.mean_vol0.clone(),
    }
}

fn summarize_all(spec: &ModelSpec, ctx: &Ctx, particles: &[f64]) -> Vec<MeasureSummary> {
    let (n, m) = (ctx.n, ctx.m);
    (0..ctx.ks * (n + 1))
        .into_par_iter()
        .map(|i| spec.summarize(ctx.t(i % (n + 1)), &particles[i * m..(i + 1) * m]))
        .collect()
}

/// `lambda * forward particles + (1 - lambda) * flow`, index-paired.
pub(crate) fn blend_flow(ctx: &Ctx, flow: &MeasureFlow, fwd: &Forward, lambda: f64) -> MeasureFlow {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| lambda * y + (1.0 - lambda) * x).collect() };
    let particles = mix(&flow.particles, &fwd.particles);
    let summaries = summarize_all(ctx.spec, ctx, &particles);
    MeasureFlow {
        n_scenarios: flow.n_scenarios,
        n_particles: flow.n_particles,
        n_steps: flow.n_steps,
        summaries,
        mean_drift: mix(&flow.mean_drift, &fwd.mean_drift),
        mean_vol0: mix(&flow.mean_vol0, &fwd.mean_vol0),
        particles,
    }
}

/// New feedback maps from a forward sweep.
pub(crate) fn backward(
    ctx: &Ctx,
    mode: Mode,
    fwd: &Forward,
    flow: &MeasureFlow,
    prev: &FeedbackMaps,
) -> Result<(FeedbackMaps, f64)> {
    let (n, m, dt) = (ctx.n, ctx.m, ctx.dt);
    let spec = ctx.spec;
    let g = ctx.gamma;
    let sq = dt.sqrt();
    let mut maps = prev.clone();
    let mut residual_sum = 0.0;
    let mut residual_count = 0usize;

    // Terminal maps: fit the assigned terminal adjoints.
    if mode.major() {
        let mut ne = NormalEquations::new(ctx.bmaj.len(), 1);
        let mut phi = vec![0.0; ctx.bmaj.len()];
        for s in 0..ctx.ks {
            let i = s * (n + 1) + n;
            ctx.bmaj.eval_into(&[fwd.major.x0[i], flow.summary(s, n).mean], &mut phi);
            ne.add(&phi, &[fwd.major.p0[i]]);
        }
        maps.major_p[n] = ne.solve(n)?.0.remove(0);
    }
    if mode.minor() {
        let parts: Vec<NormalEquations> = (0..ctx.ks)
            .into_par_iter()
            .map(|s| {
                let mut ne = NormalEquations::new(ctx.bmin.len(), 1);
                let mut phi = vec![0.0; ctx.bmin.len()];
                let x0 = major_x0(ctx, mode, fwd, s, n);
                let mean = flow.summary(s, n).mean;
                for j in 0..m {
                    let i = (s * m + j) * (n + 1) + n;
                    ctx.bmin.eval_into(&[fwd.minor.x[i], x0, mean], &mut phi);
                    ne.add(&phi, &[fwd.minor.p[i]]);
                }
                ne
            })
            .collect();
        maps.minor_p[n] = merge(parts, ctx.bmin.len(), 1).solve(n)?.0.remove(0);
    }

    for k in (0..n).rev() {
        let t = ctx.t(k);
        if mode.major() {
            let b1 = spec.slope_x(Coef::MajorDrift, t);
            let s1 = spec.slope_x(Coef::MajorVol, t);
            let next = &maps.major_p[k + 1];
            let ne = {
                let mut ne = NormalEquations::new(ctx.bmaj.len(), 2);
                let mut phi = vec![0.0; ctx.bmaj.len()];
                let mut targets = Vec::with_capacity(ctx.ks);
                for s in 0..ctx.ks {
                    let i = s * (n + 1) + k;
                    let ms = flow.summary(s, k);
                    let (x0, u0) = (fwd.major.x0[i], fwd.major.u0[i]);
                    let (drift, vol) = ctx.major_coefs(s, k, x0, u0, ms);
                    let (ep, epz) = match ctx.scheme {
                        BackwardScheme::RegressLater => {
                            let (md, mv) = (flow.mean_drift[flow.idx(s, k)], flow.mean_vol0[flow.idx(s, k)]);
                            let mut ep = 0.0;
                            let mut epz = 0.0;
                            for &(z, w) in &ctx.nodes {
                                let v = ctx.bmaj.predict(
                                    next,
                                    &[x0 + drift * dt + vol * sq * z, ms.mean + md * dt + mv * sq * z],
                                );
                                ep += w * v;
                                epz += w * v * z;
                            }
                            (ep, epz / sq)
                        }
                        BackwardScheme::RegressNow => {
                            let ip = s * (n + 1) + k + 1;
                            let v = if k + 1 == n {
                                fwd.major.p0[ip]
                            } else {
                                ctx.bmaj.predict(next, &[fwd.major.x0[ip], flow.summary(s, k + 1).mean])
                            };
                            // Control variate: the next map at the current point.
                            let c = ctx.bmaj.predict(next, &[x0, ms.mean]);
                            (v, (v - c) * ctx.bundle.common(s)[k] / dt)
                        }
                    };
                    targets.push((s, ep, epz));
                }
                for &(s, ep, q0) in &targets {
                    let i = s * (n + 1) + k;
                    let ms = flow.summary(s, k);
                    let (x0, u0) = (fwd.major.x0[i], fwd.major.u0[i]);
                    let fx = (spec.major_cost.f0_x)(t, x0, u0, &ms.moments);
                    let [_, _, i_f] = ctx.inp_major(s, k);
                    let p0 = match ctx.scheme {
                        BackwardScheme::RegressLater => (ep + dt * (g * (s1 * q0 + fx) + i_f)) / (1.0 - dt * g * b1),
                        BackwardScheme::RegressNow => ep + dt * (g * (b1 * ep + s1 * q0 + fx) + i_f),
                    };
                    ctx.bmaj.eval_into(&[x0, ms.mean], &mut phi);
                    ne.add(&phi, &[p0, q0]);
                }
                ne
            };
            let (mut betas, res) = ne.solve(k)?;
            residual_sum += res[0];
            residual_count += 1;
            maps.major_q[k] = betas.remove(1);
            maps.major_p[k] = betas.remove(0);
        }
        if mode.minor() {
            let b1 = spec.slope_x(Coef::MinorDrift, t);
            let s1 = spec.slope_x(Coef::MinorVol, t);
            let st1 = spec.slope_x(Coef::MinorCommonVol, t);
            let next = &maps.minor_p[k + 1];
            let p = ctx.bmin.len();
            let parts: Vec<NormalEquations> = (0..ctx.ks)
                .into_par_iter()
                .map(|s| -> Result<NormalEquations> {
                    let mut ne = NormalEquations::new(p, 3);
                    let mut phi = vec![0.0; p];
                    let mut feats = vec![0.0; p * m];
                    let mut targs = vec![0.0; 3 * m];
                    let ms = flow.summary(s, k);
                    let x0 = major_x0(ctx, mode, fwd, s, k);
                    let (d0, v0) = major_step(ctx, mode, fwd, flow, s, k);
                    let (md, mv) = (flow.mean_drift[flow.idx(s, k)], flow.mean_vol0[flow.idx(s, k)]);
                    let dw0 = ctx.bundle.common(s)[k];
                    for j in 0..m {
                        let i = (s * m + j) * (n + 1) + k;
                        let (x, u) = (fwd.minor.x[i], fwd.minor.u[i]);
                        let (drift, vol, vol0) = ctx.minor_coefs(s, j, k, x, u, ms);
                        let (ep, q, qt) = match ctx.scheme {
                            BackwardScheme::RegressLater => {
                                let mut ep = 0.0;
                                let mut epz = 0.0;
                                let mut epz0 = 0.0;
                                let base = x + drift * dt;
                                let base0 = x0 + d0 * dt;
                                let basem = ms.mean + md * dt;
                                for &(z0, w0) in &ctx.nodes {
                                    let xc = base + vol0 * sq * z0;
                                    let x0n = base0 + v0 * sq * z0;
                                    let mn = basem + mv * sq * z0;
                                    for &(z, w) in &ctx.nodes {
                                        let v = ctx.bmin.predict(next, &[xc + vol * sq * z, x0n, mn]);
                                        let ww = w * w0 * v;
                                        ep += ww;
                                        epz += ww * z;
                                        epz0 += ww * z0;
                                    }
                                }
                                (ep, epz / sq, epz0 / sq)
                            }
                            BackwardScheme::RegressNow => {
                                let ip = i + 1;
                                let v = if k + 1 == n {
                                    fwd.minor.p[ip]
                                } else {
                                    let x0n = major_x0(ctx, mode, fwd, s, k + 1);
                                    ctx.bmin.predict(next, &[fwd.minor.x[ip], x0n, flow.summary(s, k + 1).mean])
                                };
                                let dw = ctx.bundle.idiosyncratic(s, j)[k];
                                let c = ctx.bmin.predict(next, &[x, x0, ms.mean]);
                                (v, (v - c) * dw / dt, (v - c) * dw0 / dt)
                            }
                        };
                        let fx = (spec.minor_cost.f1_x)(t, x, u, x0) + (spec.minor_cost.f2_x)(t, x, &ms.moments, x0);
                        let i_f = ctx.inp_minor(s, j, k)[3];
                        let pk = match ctx.scheme {
                            BackwardScheme::RegressLater => {
                                (ep + dt * (g * (s1 * q + st1 * qt + fx) + i_f)) / (1.0 - dt * g * b1)
                            }
                            BackwardScheme::RegressNow => ep + dt * (g * (b1 * ep + s1 * q + st1 * qt + fx) + i_f),
                        };
                        ctx.bmin.eval_into(&[x, x0, ms.mean], &mut phi);
                        for (c, &f) in phi.iter().enumerate() {
                            feats[c * m + j] = f;
                        }
                        targs[j] = pk;
                        targs[m + j] = q;
                        targs[2 * m + j] = qt;
                    }
                    ne.add_columns(m, &feats, &targs);
                    Ok(ne)
                })
                .collect::<Result<_>>()?;
            let (mut betas, res) = merge(parts, p, 3).solve(k)?;
            residual_sum += res[0];
            residual_count += 1;
            maps.minor_q_tilde[k] = betas.remove(2);
            maps.minor_q[k] = betas.remove(1);
            maps.minor_p[k] = betas.remove(0);
        }
    }
    if n > 0 {
        maps.major_q[n] = maps.major_q[n - 1].clone();
        maps.minor_q[n] = maps.minor_q[n - 1].clone();
        maps.minor_q_tilde[n] = maps.minor_q_tilde[n - 1].clone();
    }
    Ok((maps, residual_sum / residual_count.max(1) as f64))
}

fn merge(parts: Vec<NormalEquations>, p: usize, n_rhs: usize) -> NormalEquations {
    let mut acc = NormalEquations::new(p, n_rhs);
    for part in &parts {
        acc.merge(part);
    }
    acc
}

#[inline]
fn major_x0(ctx: &Ctx, mode: Mode, fwd: &Forward, s: usize, k: usize) -> f64 {
    let i = s * (ctx.n + 1) + k;
    match mode {
        Mode::MinorOnly(path) => path.x0[i],
        _ => fwd.major.x0[i],
    }
}

/// `(drift, vol)` of the major over step `k`.
fn major_step(ctx: &Ctx, mode: Mode, fwd: &Forward, flow: &MeasureFlow, s: usize, k: usize) -> (f64, f64) {
    let i = s * (ctx.n + 1) + k;
    match mode {
        Mode::MinorOnly(path) => (path.drift[i], path.vol[i]),
        _ => ctx.major_coefs(s, k, fwd.major.x0[i], fwd.major.u0[i], flow.summary(s, k)),
    }
}

pub(crate) fn major_path_of(field: &SolutionField, spec: &ModelSpec, inputs: Option<&InputField>) -> MajorPath {
    let n = field.n_steps();
    let len = field.n_scenarios * (n + 1);
    let mut drift = vec![0.0; len];
    let mut vol = vec![0.0; len];
    for s in 0..field.n_scenarios {
        for k in 0..n {
            let i = s * (n + 1) + k;
            let t = field.grid.t(k);
            let ms = field.flow.summary(s, k);
            let (x0, u0) = (field.major.x0[i], field.major.u0[i]);
            let (ib, is) = inputs.map_or((0.0, 0.0), |inp| (inp.b0[i], inp.sigma0[i]));
            drift[i] = field.gamma * spec.eval_coef(Coef::MajorDrift, t, x0, u0, ms) + ib;
            vol[i] = field.gamma * spec.eval_coef(Coef::MajorVol, t, x0, u0, ms) + is;
        }
    }
    MajorPath { x0: field.major.x0.clone(), drift, vol }
}

/// Relative S-norm distance restricted to the simulated blocks.
fn relative_change(ctx: &Ctx, a: &Forward, b: &Forward) -> f64 {
    let dist = super::snorm_core(&ctx.bundle.grid, ctx.ks, ctx.m, &a.major, Some(&b.major), &a.minor, Some(&b.minor));
    let size = super::snorm_core(&ctx.bundle.grid, ctx.ks, ctx.m, &a.major, None, &a.minor, None);
    dist / size.max(1e-300)
}

/// Sup over knots of the scenario-averaged `W2^2` between the flow and the
/// simulated particles, relative to `1 + ` their second moment.
fn consistency_gap(ctx: &Ctx, flow: &MeasureFlow, fwd: &Forward) -> Result<f64> {
    let (n, m) = (ctx.n, ctx.m);
    let per_k: Vec<(f64, f64)> = (0..=n)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let mut w = 0.0;
            let mut second = 0.0;
            for s in 0..ctx.ks {
                let i = (s * (n + 1) + k) * m;
                let a = &fwd.particles[i..i + m];
                w += crate::stochastics::w2_squared(a, flow.ensemble(s, k))?;
                second += a.iter().map(|x| x * x).sum::<f64>() / m as f64;
            }
            Ok((w / ctx.ks as f64, second / ctx.ks as f64))
        })
        .collect::<Result<_>>()?;
    Ok(per_k.iter().map(|(w, s2)| w / (1.0 + s2)).fold(0.0, f64::max))
}

pub(crate) struct PicardResult {
    pub fwd: Forward,
    pub maps: FeedbackMaps,
    pub flow: MeasureFlow,
    pub diagnostics: Diagnostics,
}

const DIVERGENCE_RUN: usize = 5;

/// Damped Picard iteration on the feedback maps (and, in coupled mode, on
/// the measure flow).
pub(crate) fn picard(
    ctx: &Ctx,
    mode: Mode,
    cfg: &SolverConfig,
    init_maps: FeedbackMaps,
    init_flow: MeasureFlow,
    tol: f64,
    cold_start: bool,
) -> Result<PicardResult> {
    let lambda = cfg.picard_damping;
    let mut maps = init_maps;
    let mut flow = init_flow;
    let mut prev: Option<Forward> = None;
    let mut diag = Diagnostics::default();
    let mut increases = 0usize;
    for it in 0..cfg.max_picard {
        let fwd = forward(ctx, mode, &maps, FlowSource::Frozen(&flow))?;
        let residual = prev.as_ref().map_or(f64::INFINITY, |p| relative_change(ctx, &fwd, p));
        let consistency = if matches!(mode, Mode::Coupled) { consistency_gap(ctx, &flow, &fwd)? } else { 0.0 };
        if residual.is_finite() {
            diag.residuals.push(residual);
            if matches!(mode, Mode::Coupled) {
                diag.consistency.push(consistency);
            }
        }
        if residual <= tol && consistency <= tol * tol {
            return Ok(PicardResult { fwd, maps, flow, diagnostics: diag });
        }
        if let [.., a, b] = diag.residuals[..] {
            if b > a && b > 10.0 * tol {
                increases += 1;
                if increases >= DIVERGENCE_RUN {
                    return Err(MfgError::PicardDivergence { history: diag.residuals });
                }
            } else {
                increases = 0;
            }
        }
        let (new_maps, res) = backward(ctx, mode, &fwd, &flow, &maps)?;
        diag.regression_residual = res;
        let l = if cold_start && it == 0 { 1.0 } else { lambda };
        maps.blend(&new_maps, l);
        if matches!(mode, Mode::Coupled) {
            flow = blend_flow(ctx, &flow, &fwd, l);
        }
        prev = Some(fwd);
    }
    Err(MfgError::PicardNonConvergence { history: diag.residuals })
}

pub(crate) fn into_field(ctx: &Ctx, res: PicardResult) -> SolutionField {
    SolutionField {
        grid: ctx.bundle.grid,
        n_scenarios: ctx.ks,
        n_particles: ctx.m,
        gamma: ctx.gamma,
        major: res.fwd.major,
        minor: res.fwd.minor,
        flow: res.flow,
        maps: res.maps,
        diagnostics: res.diagnostics,
    }
}

fn check_flow(flow: &MeasureFlow, bundle: &PathBundle) -> Result<()> {
    if (flow.n_scenarios, flow.n_particles, flow.n_steps) != (bundle.n_scenarios, bundle.n_particles, bundle.n_steps()) {
        return Err(MfgError::ShapeMismatch(format!(
            "measure flow is {}x{}x{}, bundle is {}x{}x{}",
            flow.n_scenarios,
            flow.n_particles,
            flow.n_steps,
            bundle.n_scenarios,
            bundle.n_particles,
            bundle.n_steps()
        )));
    }
    Ok(())
}

/// Major block under a frozen flow.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorSolution {
    pub major: MajorPaths,
    pub maps: FeedbackMaps,
    pub diagnostics: Diagnostics,
}

/// Minor block under a frozen major path and flow.
#[derive(Debug, Clone, PartialEq)]
pub struct MinorSolution {
    pub minor: MinorPaths,
    pub maps: FeedbackMaps,
    pub diagnostics: Diagnostics,
}

/// Solves the major agent's problem against a frozen measure flow.
#[allow(non_snake_case)]
pub fn solve_Pm(spec: &ModelSpec, m_flow: &MeasureFlow, bundle: &PathBundle, cfg: &SolverConfig) -> Result<MajorSolution> {
    cfg.validate()?;
    check_flow(m_flow, bundle)?;
    let ctx = Ctx::new(spec, bundle, cfg.basis_degree, cfg.scheme, 1.0, None)?;
    let maps = FeedbackMaps::zeros(ctx.n, cfg.basis_degree);
    let res = picard(&ctx, Mode::MajorOnly, cfg, maps, m_flow.clone(), cfg.picard_tol, true)?;
    Ok(MajorSolution { major: res.fwd.major, maps: res.maps, diagnostics: res.diagnostics })
}

/// Solves the representative minor agent's problem against a frozen major
/// path and measure flow.
#[allow(non_snake_case)]
pub fn solve_PX0m(
    spec: &ModelSpec,
    x0_path: &MajorPath,
    m_flow: &MeasureFlow,
    bundle: &PathBundle,
    cfg: &SolverConfig,
) -> Result<MinorSolution> {
    cfg.validate()?;
    check_flow(m_flow, bundle)?;
    let len = bundle.n_scenarios * (bundle.n_steps() + 1);
    if x0_path.x0.len() != len || x0_path.drift.len() != len || x0_path.vol.len() != len {
        return Err(MfgError::ShapeMismatch("major path does not match the bundle".into()));
    }
    let ctx = Ctx::new(spec, bundle, cfg.basis_degree, cfg.scheme, 1.0, None)?;
    let maps = FeedbackMaps::zeros(ctx.n, cfg.basis_degree);
    let res = picard(&ctx, Mode::MinorOnly(x0_path), cfg, maps, m_flow.clone(), cfg.picard_tol, true)?;
    Ok(MinorSolution { minor: res.fwd.minor, maps: res.maps, diagnostics: res.diagnostics })
}

pub(crate) fn budget_warning(spec: &ModelSpec, cfg: &SolverConfig) -> Option<String> {
    let b = coupling_budget(spec);
    (b > cfg.coupling_delta).then(|| {
        format!("coupling budget {b:.4} exceeds delta = {}; unique solvability is not certified", cfg.coupling_delta)
    })
}

/// Self-consistent forward simulation with zero adjoints: the starting
/// point of every cold solve.
pub(crate) fn cold_start(ctx: &Ctx) -> Result<(FeedbackMaps, MeasureFlow)> {
    let maps = FeedbackMaps::zeros(ctx.n, ctx.bmaj.degree());
    let fwd = forward(ctx, Mode::Coupled, &maps, FlowSource::SelfConsistent)?;
    let flow = flow_from_forward(ctx, &fwd);
    Ok((maps, flow))
}

/// Solves the coupled system by damped Picard iteration over the feedback
/// maps, the major path and the measure flow.
pub fn solve_coupled_picard(spec: &ModelSpec, bundle: &PathBundle, cfg: &SolverConfig) -> Result<SolutionField> {
    cfg.validate()?;
    let ctx = Ctx::new(spec, bundle, cfg.basis_degree, cfg.scheme, 1.0, None)?;
    let (maps, flow) = cold_start(&ctx)?;
    let res = picard(&ctx, Mode::Coupled, cfg, maps, flow, cfg.picard_tol, true)?;
    let mut field = into_field(&ctx, res);
    if let Some(w) = budget_warning(spec, cfg) {
        field.diagnostics.warnings.push(w);
    }
    Ok(field)
}

/// Re-simulates the coupled forward dynamics with fixed feedback maps on a
/// (typically larger) bundle, with the measure flow taken from the simulated
/// particles themselves.
pub fn simulate_with_maps(spec: &ModelSpec, maps: &FeedbackMaps, bundle: &PathBundle) -> Result<SolutionField> {
    let ctx = Ctx::new(spec, bundle, maps.degree, BackwardScheme::RegressLater, 1.0, None)?;
    let fwd = forward(&ctx, Mode::Coupled, maps, FlowSource::SelfConsistent)?;
    let flow = flow_from_forward(&ctx, &fwd);
    Ok(SolutionField {
        grid: bundle.grid,
        n_scenarios: ctx.ks,
        n_particles: ctx.m,
        gamma: 1.0,
        major: fwd.major,
        minor: fwd.minor,
        flow,
        maps: maps.clone(),
        diagnostics: Diagnostics::default(),
    })
}

/// Outcome of a standalone regress-now backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStepResult {
    pub p: Vec<f64>,
    /// One integrand per supplied noise.
    pub q: Vec<Vec<f64>>,
    pub beta_p: Vec<f64>,
    pub beta_q: Vec<Vec<f64>>,
    /// Mean squared residual of the `p` fit.
    pub residual: f64,
}

/// One regression step of the backward equation on sample data:
/// `p_k = E[p_{k+1} + h_x dt | z_k]` and `q_k = E[p_{k+1} dW / dt | z_k]`
/// for each noise in `dws`, with polynomial features of `features` rows.
pub fn backward_step(
    step: usize,
    features: &[Vec<f64>],
    p_next: &[f64],
    h_x: &[f64],
    dws: &[&[f64]],
    dt: f64,
    basis_degree: usize,
) -> Result<BackwardStepResult> {
    let n = features.len();
    if n == 0 {
        return Err(MfgError::EmptyBundle("no samples".into()));
    }
    if p_next.len() != n || h_x.len() != n || dws.iter().any(|d| d.len() != n) {
        return Err(MfgError::SizeMismatch { left: n, right: p_next.len() });
    }
    let basis = PolyBasis::new(features[0].len(), basis_degree);
    let mut ne = NormalEquations::new(basis.len(), 1 + dws.len());
    let mut phi = vec![0.0; basis.len()];
    let mut targets = vec![0.0; 1 + dws.len()];
    for i in 0..n {
        basis.eval_into(&features[i], &mut phi);
        targets[0] = p_next[i] + h_x[i] * dt;
        for (l, d) in dws.iter().enumerate() {
            targets[1 + l] = p_next[i] * d[i] / dt;
        }
        ne.add(&phi, &targets);
    }
    let (mut betas, res) = ne.solve(step)?;
    let beta_q: Vec<Vec<f64>> = betas.split_off(1);
    let beta_p = betas.remove(0);
    let p = features.iter().map(|z| basis.predict(&beta_p, z)).collect();
    let q = beta_q.iter().map(|b| features.iter().map(|z| basis.predict(b, z)).collect()).collect();
    Ok(BackwardStepResult { p, q, beta_p, beta_q, residual: res[0] })
}


//! Ground truth for the linear-quadratic subfamily.
//!
//! Under the affine ansatz
//! `p0 = k0 X0 + psi0 mbar + chi0` and `p = k X + phi X0 + psi mbar + chi`
//! the coupled system reduces to scalar ODEs (derived in `docs/lq_oracle.md`),
//! integrated backward with RK4 on a refined grid. Mean flows follow forward.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MfgError, Result};
use crate::model::{Coef, ModelSpec};
use crate::fbsde::{FeedbackMaps, MajorPaths, MeasureFlow, MinorPaths, SolutionField};
use crate::stochastics::{PathBundle, TimeGrid};

/// `dX0 = (a X0 + c u0 + e mbar) dt + s dW0`,
/// `f0 = (q X0^2 + r u0^2) / 2 + coupling X0 mbar`, `g0 = g X0^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorLQ {
    pub a: f64,
    pub c: f64,
    pub e: f64,
    pub s: f64,
    pub q: f64,
    pub r: f64,
    pub coupling: f64,
    pub g: f64,
}

/// `dX = (a X + c u + e mbar) dt + sigma dW + sigma_tilde dW0`,
/// `f = (q X^2 + r u^2) / 2 + major_coupling X X0 + mean_coupling X mbar`,
/// `g = g X^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinorLQ {
    pub a: f64,
    pub c: f64,
    pub e: f64,
    pub sigma: f64,
    pub sigma_tilde: f64,
    pub q: f64,
    pub r: f64,
    pub major_coupling: f64,
    pub mean_coupling: f64,
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LQSpec {
    pub major: MajorLQ,
    pub minor: MinorLQ,
    /// Initial means `(E xi0, E xi)`; only the mean flows use them.
    pub init_means: (f64, f64),
}

impl LQSpec {
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (&self.major, &self.minor);
        let all = [
            m.a, m.c, m.e, m.s, m.q, m.r, m.coupling, m.g, n.a, n.c, n.e, n.sigma, n.sigma_tilde, n.q, n.r,
            n.major_coupling, n.mean_coupling, n.g, self.init_means.0, self.init_means.1,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::InvalidArgument("LQ coefficients must be finite".into()));
        }
        if !(m.r > 0.0 && n.r > 0.0) {
            return Err(MfgError::InvalidArgument("control weights R0, R must be positive".into()));
        }
        if m.q < 0.0 || n.q < 0.0 || m.g < 0.0 || n.g < 0.0 {
            return Err(MfgError::InvalidArgument("state weights Q0, Q, G0, G must be nonnegative".into()));
        }
        if n.mean_coupling < 0.0 {
            return Err(MfgError::InvalidArgument(
                "minor mean coupling r must be nonnegative for weak monotonicity".into(),
            ));
        }
        Ok(())
    }

    pub fn beta0(&self) -> f64 {
        self.major.c * self.major.c / self.major.r
    }

    pub fn beta(&self) -> f64 {
        self.minor.c * self.minor.c / self.minor.r
    }

    /// Copy with the mean-field and major-minor couplings scaled by `factor`.
    pub fn scale_coupling(&self, factor: f64) -> Self {
        let mut out = *self;
        out.major.e *= factor;
        out.major.coupling *= factor;
        out.minor.e *= factor;
        out.minor.major_coupling *= factor;
        out
    }
}

/// Affine-ansatz coefficients and mean flows on the knots of `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub lq: LQSpec,
    pub k0: Vec<f64>,
    pub psi0: Vec<f64>,
    pub chi0: Vec<f64>,
    pub k: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub chi: Vec<f64>,
    /// Riccati coefficient of the major's problem against an exogenous
    /// mean path: `k0_hat' = -2 a0 k0_hat + beta0 k0_hat^2 - Q0`.
    pub k0_hat: Vec<f64>,
    pub mean_x0: Vec<f64>,
    pub mean_m: Vec<f64>,
    /// Largest knot difference between the 10x- and 20x-refined integrations.
    pub residual: f64,
}

const N_COEF: usize = 8;
const ESCAPE: f64 = 1e8;

fn rhs(lq: &LQSpec, y: &[f64; N_COEF]) -> [f64; N_COEF] {
    let (m, n) = (&lq.major, &lq.minor);
    let (b0, b) = (lq.beta0(), lq.beta());
    let [k0, psi0, chi0, k, phi, psi, chi, kh] = *y;
    let a00 = m.a - b0 * k0;
    let a0m = m.e - b0 * psi0;
    let amm = n.a + n.e - b * (k + psi);
    [
        -2.0 * m.a * k0 + b0 * k0 * k0 - m.q + b * psi0 * phi,
        -m.a * psi0 - m.coupling - k0 * a0m - psi0 * amm,
        -m.a * chi0 + b0 * k0 * chi0 + b * psi0 * chi,
        -2.0 * n.a * k + b * k * k - n.q,
        -n.a * phi - n.major_coupling + b * k * phi - phi * a00 + b * psi * phi,
        -n.a * psi - n.mean_coupling - k * (n.e - b * psi) - phi * a0m - psi * amm,
        -n.a * chi + b * k * chi + phi * b0 * chi0 + psi * b * chi,
        -2.0 * m.a * kh + b0 * kh * kh - m.q,
    ]
}

fn axpy(y: &[f64; N_COEF], h: f64, d: &[f64; N_COEF]) -> [f64; N_COEF] {
    std::array::from_fn(|i| y[i] + h * d[i])
}

/// RK4 in reversed time, `factor` substeps per knot interval. Returns values
/// at the knots and at every half-substep (the latter for the forward pass).
fn integrate_backward(lq: &LQSpec, grid: &TimeGrid, factor: usize) -> Result<Vec<[f64; N_COEF]>> {
    let fine = grid.refined(2 * factor);
    let n = fine.n_steps();
    let h = 2.0 * fine.dt();
    let mut out = vec![[0.0; N_COEF]; n + 1];
    let mut y = [0.0; N_COEF];
    y[0] = lq.major.g;
    y[3] = lq.minor.g;
    y[7] = lq.major.g;
    out[n] = y;
    let mut j = n;
    while j > 0 {
        let k1 = rhs(lq, &y);
        let k2 = rhs(lq, &axpy(&y, -0.5 * h, &k1));
        let k3 = rhs(lq, &axpy(&y, -0.5 * h, &k2));
        let k4 = rhs(lq, &axpy(&y, -h, &k3));
        y = std::array::from_fn(|i| y[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        if y.iter().any(|v| !v.is_finite() || v.abs() > ESCAPE) {
            return Err(MfgError::RiccatiEscape { time: fine.t(j - 2) });
        }
        out[j - 2] = y;
        j -= 2;
    }
    // Midpoints by a separate half step from each right endpoint.
    let mut j = n;
    while j > 0 {
        let yr = out[j];
        let hh = 0.5 * h;
        let k1 = rhs(lq, &yr);
        let k2 = rhs(lq, &axpy(&yr, -0.5 * hh, &k1));
        let k3 = rhs(lq, &axpy(&yr, -0.5 * hh, &k2));
        let k4 = rhs(lq, &axpy(&yr, -hh, &k3));
        out[j - 1] = std::array::from_fn(|i| yr[i] - hh / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        j -= 2;
    }
    Ok(out)
}

/// Solves the ansatz ODEs on `grid` refined 10x and the mean flows forward.
pub fn solve_riccati(lq: &LQSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    lq.validate()?;
    const FACTOR: usize = 10;
    let fine = integrate_backward(lq, grid, FACTOR)?;
    let check = integrate_backward(lq, grid, 2 * FACTOR)?;
    let n = grid.n_steps();
    let at = |vals: &Vec<[f64; N_COEF]>, f: usize, k: usize| vals[2 * f * k];
    let mut residual = 0.0f64;
    for k in 0..=n {
        let (a, b) = (at(&fine, FACTOR, k), at(&check, 2 * FACTOR, k));
        for i in 0..N_COEF {
            residual = residual.max((a[i] - b[i]).abs());
        }
    }

    // Forward mean flows with RK4 over the fine substeps (midpoints stored).
    let (b0, b) = (lq.beta0(), lq.beta());
    let (m, mi) = (&lq.major, &lq.minor);
    let drift = |c: &[f64; N_COEF], x: [f64; 2]| -> [f64; 2] {
        let [k0, psi0, chi0, k, phi, psi, chi, _] = *c;
        [
            (m.a - b0 * k0) * x[0] + (m.e - b0 * psi0) * x[1] - b0 * chi0,
            -b * phi * x[0] + (mi.a + mi.e - b * (k + psi)) * x[1] - b * chi,
        ]
    };
    let h = grid.dt() / FACTOR as f64;
    let mut x = [lq.init_means.0, lq.init_means.1];
    let mut mean_x0 = vec![x[0]];
    let mut mean_m = vec![x[1]];
    for s in 0..n * FACTOR {
        let (c0, cm, c1) = (&fine[2 * s], &fine[2 * s + 1], &fine[2 * s + 2]);
        let d1 = drift(c0, x);
        let d2 = drift(cm, [x[0] + 0.5 * h * d1[0], x[1] + 0.5 * h * d1[1]]);
        let d3 = drift(cm, [x[0] + 0.5 * h * d2[0], x[1] + 0.5 * h * d2[1]]);
        let d4 = drift(c1, [x[0] + h * d3[0], x[1] + h * d3[1]]);
        for i in 0..2 {
            x[i] += h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
        }
        if (s + 1) % FACTOR == 0 {
            mean_x0.push(x[0]);
            mean_m.push(x[1]);
        }
    }

    let col = |i: usize| (0..=n).map(|k| at(&fine, FACTOR, k)[i]).collect::<Vec<_>>();
    Ok(RiccatiSolution {
        grid: *grid,
        lq: *lq,
        k0: col(0),
        psi0: col(1),
        chi0: col(2),
        k: col(3),
        phi: col(4),
        psi: col(5),
        chi: col(6),
        k0_hat: col(7),
        mean_x0,
        mean_m,
        residual,
    })
}

/// Oracle controls and adjoints at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleFeedback {
    pub u0: f64,
    pub p0: f64,
    pub u: f64,
    pub p: f64,
    /// `t` was not a knot and the coefficients were interpolated linearly.
    pub interpolated: bool,
}

impl RiccatiSolution {
    /// Coefficients `[k0, psi0, chi0, k, phi, psi, chi]` at `t`, linear
    /// between knots.
    pub fn coefficients(&self, t: f64) -> ([f64; 7], bool) {
        let n = self.grid.n_steps();
        let pos = (t / self.grid.dt()).clamp(0.0, n as f64);
        let k = pos.floor() as usize;
        let near = pos.round() as usize;
        let cols = [&self.k0, &self.psi0, &self.chi0, &self.k, &self.phi, &self.psi, &self.chi];
        if (pos - near as f64).abs() < 1e-9 {
            return (std::array::from_fn(|i| cols[i][near]), false);
        }
        let w = pos - k as f64;
        (std::array::from_fn(|i| (1.0 - w) * cols[i][k] + w * cols[i][k + 1]), true)
    }

    /// `(q0, q, q_tilde)` at knot `k`.
    pub fn integrands(&self, k: usize) -> (f64, f64, f64) {
        let (m, n) = (&self.lq.major, &self.lq.minor);
        (
            self.k0[k] * m.s + self.psi0[k] * n.sigma_tilde,
            self.k[k] * n.sigma,
            self.k[k] * n.sigma_tilde + self.phi[k] * m.s + self.psi[k] * n.sigma_tilde,
        )
    }
}

/// Evaluates the ansatz adjoints and the first-order-condition controls
/// `u0 = -c0 p0 / R0`, `u = -c p / R`.
pub fn oracle_feedback(rs: &RiccatiSolution, t: f64, x: f64, x0: f64, mean_m: f64) -> OracleFeedback {
    let ([k0, psi0, chi0, k, phi, psi, chi], interpolated) = rs.coefficients(t);
    let p0 = k0 * x0 + psi0 * mean_m + chi0;
    let p = k * x + phi * x0 + psi * mean_m + chi;
    let (m, n) = (&rs.lq.major, &rs.lq.minor);
    OracleFeedback { u0: -m.c * p0 / m.r, p0, u: -n.c * p / n.r, p, interpolated }
}

/// Cost table of a one-period problem for the major agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub best_control: f64,
    pub best_cost: f64,
    /// `(control, estimated cost)` in the order of the supplied grid.
    pub table: Vec<(f64, f64)>,
}

const BRUTE_FORCE_PARTICLES: usize = 64;

/// Monte Carlo cost of holding the major control constant over a one-step
/// horizon while the minors apply zero control:
/// `f0(0, xi0, u, m_0) T + g0(X0_T, m_T)`, with common random numbers across
/// the control grid. Ties go to the smallest `|u|`, then the smaller `u`.
pub fn brute_force_single_period(
    spec: &ModelSpec,
    control_grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<BruteForceResult> {
    if control_grid.is_empty() {
        return Err(MfgError::InvalidArgument("control grid is empty".into()));
    }
    if n_mc == 0 {
        return Err(MfgError::InvalidArgument("n_mc must be at least 1".into()));
    }
    let horizon = spec.horizon;
    let sq = horizon.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Sample {
        x0: f64,
        dw0: f64,
        m0: crate::model::MeasureSummary,
        states_t: Vec<f64>,
    }
    let mut samples = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let x0 = spec.init_major.sample(&mut rng);
        let dw0 = sq * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let xs: Vec<f64> = (0..BRUTE_FORCE_PARTICLES).map(|_| spec.init_minor.sample(&mut rng)).collect();
        let m0 = spec.summarize(0.0, &xs);
        let states_t = xs
            .iter()
            .map(|&x| {
                let dw = sq * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                x + spec.eval_coef(Coef::MinorDrift, 0.0, x, 0.0, &m0) * horizon
                    + spec.eval_coef(Coef::MinorVol, 0.0, x, 0.0, &m0) * dw
                    + spec.eval_coef(Coef::MinorCommonVol, 0.0, x, 0.0, &m0) * dw0
            })
            .collect();
        samples.push(Sample { x0, dw0, m0, states_t });
    }
    let mut table = Vec::with_capacity(control_grid.len());
    for &u in control_grid {
        let mut total = 0.0;
        for s in &samples {
            let x0t = s.x0
                + spec.eval_coef(Coef::MajorDrift, 0.0, s.x0, u, &s.m0) * horizon
                + spec.eval_coef(Coef::MajorVol, 0.0, s.x0, u, &s.m0) * s.dw0;
            let mt = spec.summarize(horizon, &s.states_t);
            let cost = (spec.major_cost.f0)(0.0, s.x0, u, &s.m0.moments) * horizon + (spec.major_cost.g0)(x0t, &mt.moments);
            if !cost.is_finite() {
                return Err(MfgError::ModelEvaluation { function: "f0/g0", tuple: format!("u0={u}, x0={}", s.x0) });
            }
            total += cost;
        }
        table.push((u, total / n_mc as f64));
    }
    let &(best_control, best_cost) = table
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1).then(a.0.abs().total_cmp(&b.0.abs())).then(a.0.total_cmp(&b.0))
        })
        .expect("non-empty grid");
    Ok(BruteForceResult { best_control, best_cost, table })
}

/// Coefficients of the finite-population corrections to the frozen-field
/// best responses, on the knots of the grid. With `D = mbar^N - mbar`,
/// `Dbar = mean_i Xbar^i - mbar` and `Delta0 = X0^N - Xbar0`:
/// major correction `alpha0 D + theta0 Dbar`,
/// minor correction `alpha D + theta Dbar + zeta Delta0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponseCorrection {
    pub alpha0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Integrates the correction ODEs backward (RK4, 10 substeps per knot, with
/// coefficients interpolated linearly between knots).
pub fn best_response_correction(rs: &RiccatiSolution) -> BestResponseCorrection {
    let lq = &rs.lq;
    let (m, n) = (&lq.major, &lq.minor);
    let (b0, b) = (lq.beta0(), lq.beta());
    let rhs = |kh: f64, k: f64, y: [f64; 5]| -> [f64; 5] {
        let [al0, th0, al, th, ze] = y;
        let a0 = m.a - b0 * kh;
        let kap0 = kh * m.e + m.coupling;
        let a = n.a - b * k;
        let kap = k * n.e + n.mean_coupling;
        [
            -al0 * (n.a + n.e) - a0 * al0 - kap0,
            al0 * b * k - th0 * (n.a - b * k) - a0 * th0,
            -al * (n.a + n.e) - ze * m.e - a * al - kap,
            al * b * k - th * (n.a - b * k) - a * th,
            -ze * m.a - a * ze - n.major_coupling,
        ]
    };
    let grid = rs.grid;
    let nk = grid.n_steps();
    const SUB: usize = 10;
    let h = grid.dt() / SUB as f64;
    let mut y = [0.0; 5];
    let mut out = vec![[0.0; 5]; nk + 1];
    for k in (0..nk).rev() {
        let lerp = |v: &Vec<f64>, w: f64| v[k] + w * (v[k + 1] - v[k]);
        for s in (0..SUB).rev() {
            let w1 = (s + 1) as f64 / SUB as f64;
            let wm = (s as f64 + 0.5) / SUB as f64;
            let w0 = s as f64 / SUB as f64;
            let f = |w: f64, y: [f64; 5]| rhs(lerp(&rs.k0_hat, w), lerp(&rs.k, w), y);
            let d1 = f(w1, y);
            let d2 = f(wm, std::array::from_fn(|i| y[i] - 0.5 * h * d1[i]));
            let d3 = f(wm, std::array::from_fn(|i| y[i] - 0.5 * h * d2[i]));
            let d4 = f(w0, std::array::from_fn(|i| y[i] - h * d3[i]));
            y = std::array::from_fn(|i| y[i] - h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]));
        }
        out[k] = y;
    }
    let col = |i: usize| out.iter().map(|v| v[i]).collect();
    BestResponseCorrection { alpha0: col(0), theta0: col(1), alpha: col(2), theta: col(3), zeta: col(4) }
}

/// The oracle as a [`SolutionField`] on `bundle`: Euler paths driven by the
/// oracle feedback, with `mbar` taken as the scenario's particle mean, so
/// that it can be compared with solver output on the same noise.
pub fn oracle_field(rs: &RiccatiSolution, spec: &ModelSpec, bundle: &PathBundle) -> Result<SolutionField> {
    let grid = bundle.grid;
    if grid != rs.grid {
        return Err(MfgError::ShapeMismatch("oracle and bundle grids differ".into()));
    }
    let (n, ks, m) = (grid.n_steps(), bundle.n_scenarios, bundle.n_particles);
    let dt = grid.dt();
    let mut major = MajorPaths::zeros(ks * (n + 1));
    let mut minor = MinorPaths::zeros(ks * m * (n + 1));
    let mut particles = vec![0.0; ks * (n + 1) * m];
    let mut summaries = Vec::with_capacity(ks * (n + 1));
    let mut mean_drift = vec![0.0; ks * (n + 1)];
    let mut mean_vol0 = vec![0.0; ks * (n + 1)];
    for s in 0..ks {
        let dw0 = bundle.common(s);
        let mut x0 = bundle.xi0[s];
        let mut xs: Vec<f64> = (0..m).map(|j| bundle.xi(s, j)).collect();
        for k in 0..=n {
            let t = grid.t(k);
            let ms = spec.summarize(t, &xs);
            let (q0, q, qt) = rs.integrands(k.min(n.saturating_sub(1)));
            let fb0 = oracle_feedback(rs, t, 0.0, x0, ms.mean);
            let i0 = s * (n + 1) + k;
            major.x0[i0] = x0;
            major.p0[i0] = fb0.p0;
            major.q0[i0] = q0;
            major.u0[i0] = fb0.u0;
            let mut sd = 0.0;
            let mut sv = 0.0;
            for (j, xj) in xs.iter_mut().enumerate() {
                let x = *xj;
                let fb = oracle_feedback(rs, t, x, x0, ms.mean);
                let i = (s * m + j) * (n + 1) + k;
                minor.x[i] = x;
                minor.p[i] = fb.p;
                minor.q[i] = q;
                minor.q_tilde[i] = qt;
                minor.u[i] = fb.u;
                particles[i0 * m + j] = x;
                if k < n {
                    let drift = spec.eval_coef(Coef::MinorDrift, t, x, fb.u, &ms);
                    let vol = spec.eval_coef(Coef::MinorVol, t, x, fb.u, &ms);
                    let vol0 = spec.eval_coef(Coef::MinorCommonVol, t, x, fb.u, &ms);
                    sd += drift;
                    sv += vol0;
                    *xj = x + drift * dt + vol * bundle.idiosyncratic(s, j)[k] + vol0 * dw0[k];
                }
            }
            if k < n {
                mean_drift[i0] = sd / m as f64;
                mean_vol0[i0] = sv / m as f64;
                let drift0 = spec.eval_coef(Coef::MajorDrift, t, x0, fb0.u0, &ms);
                let vol0 = spec.eval_coef(Coef::MajorVol, t, x0, fb0.u0, &ms);
                x0 += drift0 * dt + vol0 * dw0[k];
            }
            summaries.push(ms);
        }
    }
    Ok(SolutionField {
        grid,
        n_scenarios: ks,
        n_particles: m,
        gamma: 1.0,
        major,
        minor,
        flow: MeasureFlow { n_scenarios: ks, n_particles: m, n_steps: n, particles, summaries, mean_drift, mean_vol0 },
        maps: FeedbackMaps::zeros(n, 1),
        diagnostics: Default::default(),
    })
}

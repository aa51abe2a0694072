use std::sync::Arc;

use super::*;
use crate::catalog;
use crate::fbsde::{simulate_with_maps, solve_coupled_picard, SolverConfig};
use crate::stochastics::sample_bundle;

fn cfg() -> SolverConfig {
    SolverConfig { n_steps: 20, n_scenarios: 16, n_particles: 32, ..SolverConfig::default() }
}

fn solved(spec: &ModelSpec) -> (SolutionField, PathBundle) {
    let c = cfg();
    let grid = TimeGrid::new(spec.horizon, c.n_steps).unwrap();
    let bundle = sample_bundle(grid, c.n_scenarios, c.n_particles, spec.init_major, spec.init_minor, c.seed).unwrap();
    (solve_coupled_picard(spec, &bundle, &c).unwrap(), bundle)
}

fn game_bundle(spec: &ModelSpec, grid: TimeGrid, ks: usize, n: usize, game: u64) -> PathBundle {
    PathBundle::sample(grid, ks, n, spec.init_major, spec.init_minor, cfg().seed, Population::Game(game)).unwrap()
}

/// lq-decoupled with constant (dyadic) intercepts in every coefficient.
fn constant_kernel_spec() -> ModelSpec {
    let mut spec = catalog::lq_decoupled();
    spec.coeffs[Coef::MajorDrift as usize].intercept_kernel = Arc::new(|_, _| 0.5);
    spec.coeffs[Coef::MinorDrift as usize].intercept_kernel = Arc::new(|_, _| -0.25);
    spec
}

#[test]
fn limit_agents_on_solver_noise_reproduce_the_field() {
    let spec = catalog::lq_weak_coupling();
    let (solved_field, bundle) = solved(&spec);
    let field = simulate_with_maps(&spec, &solved_field.maps, &bundle).unwrap();
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let m = bundle.n_particles;
    let agents = simulate_limit_agents(&flow, &spec, m, &bundle).unwrap();
    let n = field.n_steps();
    for s in 0..bundle.n_scenarios {
        for j in 0..m {
            for k in 0..=n {
                assert_eq!(agents.state(s, j + 1, k), field.minor.x[field.minor_idx(s, j, k)]);
                if k < n {
                    assert_eq!(agents.controls.get(s, j + 1, k), field.minor.u[field.minor_idx(s, j, k)]);
                }
            }
        }
    }
    // One agent is the first representative particle.
    let one = simulate_limit_agents(&flow, &spec, 1, &bundle).unwrap();
    for k in 0..=n {
        assert_eq!(one.state(3, 1, k), field.minor.x[field.minor_idx(3, 0, k)]);
    }
}

#[test]
fn simulated_flow_matches_simulate_with_maps() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let a = simulate_with_maps(&spec, &field.maps, &bundle).unwrap();
    let b = LimitFlow::simulate(&spec, &field.maps, &bundle).unwrap();
    assert_eq!(a.major.x0, b.x0);
    for s in 0..bundle.n_scenarios {
        for k in 0..=a.n_steps() {
            assert_eq!(a.flow.summary(s, k).mean, b.summary(s, k).mean);
        }
    }
}

#[test]
fn limit_agents_are_exchangeable() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let g = game_bundle(&spec, field.grid, bundle.n_scenarios, 5, 0);
    let perm = [3usize, 0, 4, 1, 2];
    let mut p = g.clone();
    let n = g.n_steps();
    for s in 0..g.n_scenarios {
        for (to, &from) in perm.iter().enumerate() {
            p.xi[s * 5 + to] = g.xi(s, from);
            let row = (s * 5 + to) * n;
            p.dw[row..row + n].copy_from_slice(g.idiosyncratic(s, from));
        }
    }
    let a = simulate_limit_agents(&flow, &spec, 5, &g).unwrap();
    let b = simulate_limit_agents(&flow, &spec, 5, &p).unwrap();
    for s in 0..g.n_scenarios {
        for (to, &from) in perm.iter().enumerate() {
            for k in 0..n {
                assert_eq!(b.state(s, to + 1, k), a.state(s, from + 1, k));
                assert_eq!(b.controls.get(s, to + 1, k), a.controls.get(s, from + 1, k));
            }
        }
    }
    // Relabeling leaves the chaos gap unchanged up to summation order.
    let ga = simulate_finite_game(&spec, &a.controls, &g, 5).unwrap();
    let gb = simulate_finite_game(&spec, &b.controls, &p, 5).unwrap();
    let (ca, cb) = (chaos_gap(&a, &ga).unwrap(), chaos_gap(&b, &gb).unwrap());
    assert!((ca.value - cb.value).abs() <= 1e-12 * ca.value.abs().max(1e-300));
    assert_eq!(ca.step, cb.step);
}

#[test]
fn decoupled_agents_have_uncorrelated_idiosyncratic_increments() {
    let spec = catalog::lq_decoupled();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let na = 64;
    let g = game_bundle(&spec, field.grid, bundle.n_scenarios, na, 1);
    let a = simulate_limit_agents(&flow, &spec, na, &g).unwrap();
    let n = g.n_steps();
    // Subtract the cross-agent mean increment to remove the common-noise part.
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    for s in 0..g.n_scenarios {
        for k in 0..n {
            let inc = |i: usize| a.state(s, i, k + 1) - a.state(s, i, k);
            let mean = (1..=na).map(inc).sum::<f64>() / na as f64;
            r1.push(inc(1) - mean);
            r2.push(inc(2) - mean);
        }
    }
    let c = r1.len() as f64;
    let (m1, m2) = (r1.iter().sum::<f64>() / c, r2.iter().sum::<f64>() / c);
    let cov: f64 = r1.iter().zip(&r2).map(|(x, y)| (x - m1) * (y - m2)).sum();
    let v1: f64 = r1.iter().map(|x| (x - m1).powi(2)).sum();
    let v2: f64 = r2.iter().map(|y| (y - m2).powi(2)).sum();
    let rho = cov / (v1 * v2).sqrt();
    // Centering induces a correlation of -1/(N-1).
    let expected = -1.0 / (na as f64 - 1.0);
    assert!((rho - expected).abs() < 4.0 / c.sqrt(), "rho {rho}");
}

#[test]
fn constant_kernels_make_game_and_limit_coincide() {
    let spec = constant_kernel_spec();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::simulate(&spec, &field.maps, &bundle).unwrap();
    for na in [1, 7] {
        let g = game_bundle(&spec, field.grid, bundle.n_scenarios, na, 0);
        let lim = simulate_limit_agents(&flow, &spec, na, &g).unwrap();
        let game = simulate_finite_game(&spec, &lim.controls, &g, na).unwrap();
        assert_eq!(game.x0, lim.x0);
        assert_eq!(game.x, lim.x);
        let c = chaos_gap(&lim, &game).unwrap();
        assert_eq!(c.value, 0.0);
    }
}

#[test]
fn finite_game_rejects_zero_agents_and_replays() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let g = game_bundle(&spec, field.grid, bundle.n_scenarios, 6, 0);
    assert!(simulate_limit_agents(&flow, &spec, 0, &g).is_err());
    let lim = simulate_limit_agents(&flow, &spec, 6, &g).unwrap();
    assert!(simulate_finite_game(&spec, &lim.controls, &g, 0).is_err());
    let game = simulate_finite_game(&spec, &lim.controls, &g, 6).unwrap();
    assert!(game.replay_residual(&spec, &g).unwrap() < 1e-12);
    // N = 1: the empirical measure is the agent's own state.
    let lim1 = simulate_limit_agents(&flow, &spec, 1, &g).unwrap();
    let game1 = simulate_finite_game(&spec, &lim1.controls, &g, 1).unwrap();
    for k in 0..=g.n_steps() {
        assert_eq!(game1.summary(2, k).mean, game1.state(2, 1, k));
    }
}

#[test]
fn limit_agents_need_the_flow_common_noise() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let other = PathBundle::sample(field.grid, bundle.n_scenarios, 4, spec.init_major, spec.init_minor, 99, Population::Game(0)).unwrap();
    assert!(simulate_limit_agents(&flow, &spec, 4, &other).is_err());
}

#[test]
fn chaos_gap_rejects_unpaired_inputs() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let g0 = game_bundle(&spec, field.grid, bundle.n_scenarios, 4, 0);
    let g1 = game_bundle(&spec, field.grid, bundle.n_scenarios, 4, 1);
    let lim = simulate_limit_agents(&flow, &spec, 4, &g0).unwrap();
    let game = simulate_finite_game(&spec, &lim.controls, &g1, 4).unwrap();
    assert!(matches!(chaos_gap(&lim, &game), Err(MfgError::ShapeMismatch(_))));
}

#[test]
fn zero_costs_give_zero_estimate() {
    let spec = catalog::zero_cost();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let g = game_bundle(&spec, grid, 8, 3, 0);
    let controls = AgentControls { n_agents: 3, n_replications: 8, n_steps: 10, u0: vec![0.3; 80], u: vec![-0.2; 240] };
    let game = simulate_finite_game(&spec, &controls, &g, 3).unwrap();
    for i in 0..=3 {
        assert_eq!(estimate_cost(&spec, i, &game, 8).unwrap(), (0.0, 0.0));
    }
}

#[test]
fn single_step_cost_matches_hand_computation() {
    let spec = catalog::lq_weak_coupling();
    let lq = spec.lq.unwrap();
    let (m, mi) = (lq.major, lq.minor);
    let grid = TimeGrid::new(spec.horizon, 1).unwrap();
    let na = 3;
    let g = game_bundle(&spec, grid, 4, na, 0);
    let u0 = [0.4, -0.1, 0.0, 1.2];
    let u: Vec<f64> = (0..4 * na).map(|i| 0.1 * i as f64 - 0.5).collect();
    let controls = AgentControls { n_agents: na, n_replications: 4, n_steps: 1, u0: u0.to_vec(), u: u.clone() };
    let game = simulate_finite_game(&spec, &controls, &g, na).unwrap();
    let dt = spec.horizon;
    let mut j0 = Vec::new();
    let mut j2 = Vec::new();
    for s in 0..4 {
        let xs: Vec<f64> = (0..na).map(|j| g.xi(s, j)).collect();
        let mbar = xs.iter().sum::<f64>() / na as f64;
        let x0 = g.xi0[s];
        let x0n = x0 + (m.a * x0 + m.c * u0[s] + m.e * mbar) * dt + m.s * g.common(s)[0];
        let xn: Vec<f64> = (0..na)
            .map(|j| {
                xs[j] + (mi.a * xs[j] + mi.c * u[s * na + j] + mi.e * mbar) * dt
                    + mi.sigma * g.idiosyncratic(s, j)[0]
                    + mi.sigma_tilde * g.common(s)[0]
            })
            .collect();
        j0.push(
            dt * (0.5 * (m.q * x0 * x0 + m.r * u0[s] * u0[s]) + m.coupling * x0 * mbar) + 0.5 * m.g * x0n * x0n,
        );
        let (x, ui) = (xs[1], u[s * na + 1]);
        j2.push(
            dt * (0.5 * (mi.q * x * x + mi.r * ui * ui) + mi.major_coupling * x * x0 + mi.mean_coupling * x * mbar)
                + 0.5 * mi.g * xn[1] * xn[1],
        );
    }
    let (a, _) = estimate_cost(&spec, 0, &game, 4).unwrap();
    let (b, _) = estimate_cost(&spec, 2, &game, 4).unwrap();
    assert!((a - j0.iter().sum::<f64>() / 4.0).abs() < 1e-12, "{a} {j0:?}");
    assert!((b - j2.iter().sum::<f64>() / 4.0).abs() < 1e-12, "{b} {j2:?}");
}

#[test]
fn doubling_replications_shrinks_the_stderr() {
    let spec = catalog::lq_weak_coupling();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let g = game_bundle(&spec, grid, 2048, 2, 0);
    let controls = AgentControls { n_agents: 2, n_replications: 2048, n_steps: 10, u0: vec![0.0; 20480], u: vec![0.0; 40960] };
    let game = simulate_finite_game(&spec, &controls, &g, 2).unwrap();
    for i in [0, 1] {
        let (_, a) = estimate_cost(&spec, i, &game, 1024).unwrap();
        let (_, b) = estimate_cost(&spec, i, &game, 2048).unwrap();
        let ratio = a / b;
        assert!((ratio - 2f64.sqrt()).abs() < 0.2, "ratio {ratio}");
    }
    assert!(estimate_cost(&spec, 0, &game, 4096).is_err());
    assert!(estimate_cost(&spec, 3, &game, 10).is_err());
}

#[test]
fn deviation_gap_edge_cases() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let g = game_bundle(&spec, field.grid, bundle.n_scenarios, 4, 0);
    assert!(matches!(deviation_gap(&spec, &flow, 0, &[], 4, &g), Err(MfgError::EmptyFamily)));
    for i in [0, 2] {
        let own = deviation_gap(&spec, &flow, i, &[Deviation::Scale(1.0)], 4, &g).unwrap();
        assert_eq!(own.value, 0.0);
        assert_eq!(own.members[0].diff, 0.0);
        let fam = default_family(&spec);
        let base = deviation_gap(&spec, &flow, i, &fam, 4, &g).unwrap();
        let mut huge = fam.clone();
        huge.push(Deviation::Shift(1e3));
        huge.push(Deviation::Scale(-1e3));
        let with = deviation_gap(&spec, &flow, i, &huge, 4, &g).unwrap();
        assert_eq!(with.value, base.value);
        assert_eq!(with.argmax, base.argmax);
        assert!(with.members[fam.len()].diff < -1.0);
    }
    let other = catalog::lq_decoupled();
    let mut non_lq = other.clone();
    non_lq.lq = None;
    let (f2, b2) = solved(&other);
    let flow2 = LimitFlow::from_field(&f2, &b2).unwrap();
    let g2 = game_bundle(&other, f2.grid, b2.n_scenarios, 4, 0);
    assert!(matches!(
        deviation_gap(&non_lq, &flow2, 0, &[Deviation::BestResponse], 4, &g2),
        Err(MfgError::OracleUnavailable(_))
    ));
}

#[test]
fn regret_identity_agrees_with_paired_costs() {
    let spec = catalog::lq_weak_coupling();
    let (field, bundle) = solved(&spec);
    let flow = LimitFlow::from_field(&field, &bundle).unwrap();
    let grid = field.grid;
    let big = PathBundle::sample(grid, 16, 2, spec.init_major, spec.init_minor, cfg().seed, Population::Game(0)).unwrap();
    for i in [0, 1] {
        let est = deviation_gap(&spec, &flow, i, &[Deviation::BestResponse], 2, &big).unwrap();
        let m = &est.members[0];
        let (r, rse) = m.regret.unwrap();
        assert!(r > 0.0);
        assert!((m.diff - r).abs() < 3.0 * (m.diff_stderr + rse), "agent {i}: direct {} regret {r}", m.diff);
    }
}

#[test]
fn loglog_fit_recovers_a_power_law() {
    let xs = [8.0, 16.0, 32.0, 64.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.75)).collect();
    let f = fit_loglog(&xs, &ys).unwrap();
    assert!((f.slope + 0.75).abs() < 1e-12);
    assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
    assert!(f.slope_ci.0 <= f.slope && f.slope <= f.slope_ci.1);
    assert!(fit_loglog(&xs, &[0.0; 4]).is_none());
    assert!(fit_loglog(&xs[..1], &ys[..1]).is_none());
}

fn small_nash() -> NashConfig {
    NashConfig { n_replications: 8, limit_particles: 256, ..NashConfig::default() }
}

#[test]
fn scaling_report_sorts_and_validates_ns() {
    let spec = catalog::lq_weak_coupling();
    let (field, _) = solved(&spec);
    let c = small_nash();
    assert!(scaling_report(&spec, &field, &[4, 8], &c).is_err());
    assert!(scaling_report(&spec, &field, &[4, 4, 8], &c).is_err());
    let a = scaling_report(&spec, &field, &[4, 8, 16], &c).unwrap();
    let b = scaling_report(&spec, &field, &[16, 4, 8], &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ns, vec![4, 8, 16]);
    assert!(a.failure.is_none());
    assert!(a.chaos_fit.is_some());
    for g in a.gap_major.iter().chain(&a.gap_minor) {
        assert!(g.value >= -2.0 * g.stderr);
    }
}

#[test]
fn constant_kernel_report_is_degenerate() {
    let spec = constant_kernel_spec();
    let (field, _) = solved(&spec);
    let r = scaling_report(&spec, &field, &[2, 4, 8], &small_nash()).unwrap();
    assert!(r.chaos.iter().all(|c| c.value == 0.0));
    assert!(r.chaos_fit.is_none());
}

#[test]
fn report_files_have_schema_and_rows() {
    let spec = catalog::lq_weak_coupling();
    let (field, _) = solved(&spec);
    let r = scaling_report(&spec, &field, &[4, 8, 16], &small_nash()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("nash.csv"), dir.path().join("plot.csv"));
    r.write_csv(&a).unwrap();
    r.write_plot_data(&b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# mfg nash csv schema v"));
    assert_eq!(lines[1], "N,chaos_gap,chaos_stderr,gap_major,gap_major_stderr,gap_minor,gap_minor_stderr");
    assert_eq!(lines.len(), 5);
    let plot = std::fs::read_to_string(&b).unwrap();
    assert_eq!(plot.lines().filter(|l| l.starts_with("chaos_gap,")).count(), 3);
}

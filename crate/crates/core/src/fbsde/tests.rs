use super::*;
use crate::catalog;
use crate::model::ModelSpec;
use crate::stochastics::{sample_bundle, InitialLaw, PathBundle};

fn small_cfg() -> SolverConfig {
    SolverConfig { n_steps: 20, n_scenarios: 16, n_particles: 32, ..SolverConfig::default() }
}

fn bundle_for(spec: &ModelSpec, cfg: &SolverConfig) -> PathBundle {
    let grid = TimeGrid::new(spec.horizon, cfg.n_steps).unwrap();
    sample_bundle(grid, cfg.n_scenarios, cfg.n_particles, spec.init_major, spec.init_minor, cfg.seed).unwrap()
}

fn cumulative(dw: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0];
    for d in dw {
        out.push(out.last().unwrap() + d);
    }
    out
}

#[test]
fn backward_step_constant_terminal_has_no_integrand() {
    // Antithetic pairs share features, so the fitted integrand is exactly 0.
    let features: Vec<Vec<f64>> = (0..200).map(|i| vec![((i / 2) as f64 * 0.37).sin()]).collect();
    let dw: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 0.1 } else { -0.1 } * (1.0 + (i / 2) as f64 * 0.01)).collect();
    let r = backward_step(3, &features, &vec![2.0; 200], &vec![0.0; 200], &[&dw], 0.01, 2).unwrap();
    assert!(r.p.iter().all(|p| (p - 2.0).abs() < 1e-8));
    assert!(r.q[0].iter().all(|q| q.abs() < 1e-8), "{:?}", &r.q[0][..4]);
}

#[test]
fn backward_step_martingale_integrand() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let dt: f64 = 0.01;
    let n = 100_000;
    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    let dw: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); dt.sqrt() * z }).collect();
    let p_next: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + b).collect();
    let features: Vec<Vec<f64>> = w.iter().map(|x| vec![*x]).collect();
    let r = backward_step(0, &features, &p_next, &vec![0.0; n], &[&dw], dt, 1).unwrap();
    let q_mean = r.q[0].iter().sum::<f64>() / n as f64;
    assert!((q_mean - 1.0).abs() < 0.05, "{q_mean}");
    assert!((r.beta_p[1] - 1.0).abs() < 0.01);
}

#[test]
fn backward_step_reproduces_linear_terminal() {
    let features: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1 - 2.0, (i as f64).cos()]).collect();
    let p_next: Vec<f64> = features.iter().map(|z| 3.0 * z[0] - z[1] + 0.5).collect();
    let r = backward_step(0, &features, &p_next, &vec![0.0; 50], &[], 0.01, 1).unwrap();
    for (p, want) in r.p.iter().zip(&p_next) {
        assert!((p - want).abs() < 1e-8);
    }
    assert!(r.q.is_empty());
}

#[test]
fn backward_step_rejects_bad_shapes() {
    assert!(matches!(backward_step(0, &[], &[], &[], &[], 0.1, 1), Err(MfgError::EmptyBundle(_))));
    let f = vec![vec![0.0]; 3];
    assert!(matches!(backward_step(0, &f, &[0.0; 2], &[0.0; 3], &[], 0.1, 1), Err(MfgError::SizeMismatch { .. })));
}

#[test]
fn free_motion_frozen_problems() {
    let spec = catalog::free_motion();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let field = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let n = cfg.n_steps;

    let major = solve_Pm(&spec, &field.flow, &bundle, &cfg).unwrap();
    assert!(major.major.p0.iter().all(|p| *p == 0.0));
    assert!(major.minor_is_empty());
    for s in 0..cfg.n_scenarios {
        let w0 = cumulative(bundle.common(s));
        for k in 0..=n {
            let want = bundle.xi0[s] + w0[k];
            assert!((major.major.x0[s * (n + 1) + k] - want).abs() < 1e-12);
        }
    }

    let path = field.major_path(&spec, None);
    let minor = solve_PX0m(&spec, &path, &field.flow, &bundle, &cfg).unwrap();
    assert!(minor.minor.p.iter().all(|p| *p == 0.0));
    for s in 0..cfg.n_scenarios {
        let w0 = cumulative(bundle.common(s));
        for j in 0..cfg.n_particles {
            let w = cumulative(bundle.idiosyncratic(s, j));
            for k in 0..=n {
                let want = bundle.xi(s, j) + w[k] + w0[k];
                let got = minor.minor.x[(s * cfg.n_particles + j) * (n + 1) + k];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

impl MajorSolution {
    fn minor_is_empty(&self) -> bool {
        self.maps.minor_p.iter().flatten().all(|v| *v == 0.0)
    }
}

#[test]
fn frozen_solvers_check_shapes() {
    let spec = catalog::free_motion();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let field = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let other = SolverConfig { n_particles: 8, ..cfg };
    let small = bundle_for(&spec, &other);
    assert!(matches!(solve_Pm(&spec, &field.flow, &small, &other), Err(MfgError::ShapeMismatch(_))));
    let mut path = field.major_path(&spec, None);
    path.x0.pop();
    assert!(matches!(solve_PX0m(&spec, &path, &field.flow, &bundle, &cfg), Err(MfgError::ShapeMismatch(_))));
}

#[test]
fn uncoupled_problem_converges_at_first_check() {
    let spec = catalog::free_motion();
    let cfg = small_cfg();
    let field = solve_coupled_picard(&spec, &bundle_for(&spec, &cfg), &cfg).unwrap();
    assert_eq!(field.diagnostics.residuals.len(), 1);
    assert!(field.minor.u.iter().all(|u| *u == 0.0));
}

#[test]
fn symmetric_instance_has_centred_means() {
    let mut lq = catalog::lq_weak_coupling_spec();
    lq.init_means = (0.0, 0.0);
    let spec = catalog::lq_model(
        "sym",
        lq,
        1.0,
        InitialLaw::Gaussian { mean: 0.0, std: 0.3 },
        InitialLaw::Gaussian { mean: 0.0, std: 0.5 },
    )
    .unwrap();
    let cfg = SolverConfig { n_scenarios: 64, ..small_cfg() };
    let field = solve_coupled_picard(&spec, &bundle_for(&spec, &cfg), &cfg).unwrap();
    let n = cfg.n_steps;
    let ks = cfg.n_scenarios as f64;
    for k in [0, n / 2, n] {
        let xs: Vec<f64> = (0..cfg.n_scenarios).map(|s| field.major.x0[field.major_idx(s, k)]).collect();
        let ms: Vec<f64> = (0..cfg.n_scenarios).map(|s| field.flow.summary(s, k).mean).collect();
        for v in [xs, ms] {
            let mean = v.iter().sum::<f64>() / ks;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ks - 1.0)).sqrt();
            assert!(mean.abs() <= 4.0 * sd / ks.sqrt() + 1e-12, "k={k}: {mean} vs {sd}");
        }
    }
}

#[test]
fn picard_matches_oracle_on_small_grid() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let field = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let rs = crate::lq_oracle::solve_riccati(spec.lq.as_ref().unwrap(), &bundle.grid).unwrap();
    let oracle = crate::lq_oracle::oracle_field(&rs, &spec, &bundle).unwrap();
    let err = relative_snorm_distance(&field, &oracle, &oracle).unwrap();
    assert!(err < 0.02, "{err}");
    assert!(field.diagnostics.warnings.is_empty());
}

#[test]
fn regress_now_approximates_the_oracle() {
    let spec = catalog::lq_weak_coupling();
    let cfg = SolverConfig { n_particles: 128, scheme: BackwardScheme::RegressNow, ..small_cfg() };
    let bundle = bundle_for(&spec, &cfg);
    let field = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let rs = crate::lq_oracle::solve_riccati(spec.lq.as_ref().unwrap(), &bundle.grid).unwrap();
    let oracle = crate::lq_oracle::oracle_field(&rs, &spec, &bundle).unwrap();
    let err = relative_snorm_distance(&field, &oracle, &oracle).unwrap();
    assert!(err < 0.1, "{err}");
}

#[test]
fn perturbed_at_zero_without_inputs_is_frozen() {
    let spec = catalog::lq_mean_reverting();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let f = solve_perturbed(&spec, 0.0, None, &bundle, &cfg, None).unwrap();
    let n = cfg.n_steps;
    for s in 0..cfg.n_scenarios {
        for k in 0..=n {
            assert_eq!(f.major.x0[f.major_idx(s, k)], bundle.xi0[s]);
            for j in 0..cfg.n_particles {
                assert_eq!(f.minor.x[f.minor_idx(s, j, k)], bundle.xi(s, j));
            }
        }
    }
    let all = [&f.major.p0, &f.major.q0, &f.minor.p, &f.minor.q, &f.minor.q_tilde];
    assert!(all.iter().all(|v| v.iter().all(|x| x.abs() < 1e-12)));
}

#[test]
fn perturbed_at_zero_with_constant_drift_input() {
    let spec = catalog::lq_mean_reverting();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let mut inputs = InputField::zeros(cfg.n_steps, cfg.n_scenarios, cfg.n_particles);
    inputs.b0.iter_mut().for_each(|v| *v = 0.7);
    let f = solve_perturbed(&spec, 0.0, Some(&inputs), &bundle, &cfg, None).unwrap();
    for s in 0..cfg.n_scenarios {
        for k in 0..=cfg.n_steps {
            let want = bundle.xi0[s] + 0.7 * bundle.grid.t(k);
            assert!((f.major.x0[f.major_idx(s, k)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbed_at_one_is_the_picard_solution() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let a = solve_perturbed(&spec, 1.0, None, &bundle, &cfg, None).unwrap();
    let b = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    assert_eq!(snorm_distance(&a, &b).unwrap(), 0.0);
}

#[test]
fn perturbed_rejects_bad_gamma_and_inputs() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    assert!(matches!(solve_perturbed(&spec, 1.5, None, &bundle, &cfg, None), Err(MfgError::InvalidArgument(_))));
    let wrong = InputField::zeros(cfg.n_steps + 1, cfg.n_scenarios, cfg.n_particles);
    assert!(matches!(solve_perturbed(&spec, 0.5, Some(&wrong), &bundle, &cfg, None), Err(MfgError::ShapeMismatch(_))));
}

#[test]
fn phi_map_with_zero_step_ignores_its_argument() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let a = solve_perturbed(&spec, 0.0, None, &bundle, &cfg, None).unwrap();
    let b = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let fa = phi_map(&spec, &a, 0.0, 0.0, None, &bundle, &cfg).unwrap();
    let fb = phi_map(&spec, &b, 0.0, 0.0, None, &bundle, &cfg).unwrap();
    assert_eq!(snorm_distance(&fa, &fb).unwrap(), 0.0);
}

#[test]
fn phi_map_preserves_the_solution() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let sol = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let image = phi_map(&spec, &sol, 0.5, 0.5, None, &bundle, &cfg).unwrap();
    let gap = relative_snorm_distance(&image, &sol, &sol).unwrap();
    assert!(gap < 10.0 * cfg.picard_tol, "{gap}");
}

#[test]
fn continuation_on_uncoupled_problem_takes_one_step() {
    let spec = catalog::free_motion();
    let cfg = SolverConfig { continuation_step: 1.0, ..small_cfg() };
    let f = solve_continuation(&spec, &bundle_for(&spec, &cfg), &cfg).unwrap();
    assert_eq!(f.diagnostics.continuation.len(), 1);
    assert!(f.diagnostics.continuation[0].ratio < 1e-6);
    assert_eq!(f.gamma, 1.0);
}

#[test]
fn continuation_agrees_with_picard() {
    let spec = catalog::lq_weak_coupling();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let a = solve_continuation(&spec, &bundle, &cfg).unwrap();
    let b = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let gap = relative_snorm_distance(&a, &b, &b).unwrap();
    assert!(gap < 5.0 * cfg.picard_tol, "{gap}");
    assert!(a.diagnostics.continuation.iter().all(|s| s.ratio < 1.0));
    let total: f64 = a.diagnostics.continuation.iter().map(|s| s.eta).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn strongly_coupled_continuation_fails_cleanly() {
    let lq = catalog::lq_weak_coupling_spec().scale_coupling(40.0);
    let spec = catalog::lq_model(
        "strong",
        lq,
        1.0,
        InitialLaw::PointMass { mean: 1.0 },
        InitialLaw::Gaussian { mean: 0.5, std: 0.5 },
    )
    .unwrap();
    let cfg = SolverConfig { max_phi_iterations: 4, max_picard: 30, min_step: 0.1, ..small_cfg() };
    match solve_continuation(&spec, &bundle_for(&spec, &cfg), &cfg) {
        Ok(f) => assert!(!f.diagnostics.warnings.is_empty()),
        Err(e) => assert!(
            matches!(
                e,
                MfgError::ContinuationStalled { .. }
                    | MfgError::PicardDivergence { .. }
                    | MfgError::PicardNonConvergence { .. }
            ),
            "{e:?}"
        ),
    }
}

#[test]
fn solutions_do_not_depend_on_thread_count() {
    let spec = catalog::lq_mean_reverting();
    let cfg = small_cfg();
    let bundle = bundle_for(&spec, &cfg);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| solve_coupled_picard(&spec, &bundle, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
}

#[test]
fn snorm_of_a_shift() {
    let spec = catalog::free_motion();
    let cfg = small_cfg();
    let a = solve_coupled_picard(&spec, &bundle_for(&spec, &cfg), &cfg).unwrap();
    let mut b = a.clone();
    b.major.x0.iter_mut().for_each(|x| *x += 0.3);
    assert!(snorm_distance(&a, &b).unwrap() >= 0.3);
    assert_eq!(snorm_distance(&a, &a).unwrap(), 0.0);
    let other = solve_coupled_picard(&spec, &bundle_for(&spec, &SolverConfig { n_steps: 10, ..cfg }), &cfg);
    if let Ok(o) = other {
        assert!(matches!(snorm_distance(&a, &o), Err(MfgError::ShapeMismatch(_))));
    }
}

#[test]
fn config_validation() {
    assert!(SolverConfig::default().validate().is_ok());
    for bad in [
        SolverConfig { picard_damping: 0.0, ..Default::default() },
        SolverConfig { n_particles: 0, ..Default::default() },
        SolverConfig { min_step: 0.5, ..Default::default() },
        SolverConfig { basis_degree: 7, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(MfgError::InvalidArgument(_))));
    }
}

#[test]
fn input_norm_and_axpy() {
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let mut a = InputField::zeros(4, 2, 3);
    assert_eq!(a.norm(&grid), 0.0);
    a.g0 = vec![3.0, 3.0];
    assert!((a.norm(&grid) - 3.0).abs() < 1e-12);
    let b = a.axpy(-1.0, &a).unwrap();
    assert_eq!(b.norm(&grid), 0.0);
    // running inputs at the terminal knot do not count
    let mut c = InputField::zeros(4, 2, 3);
    for s in 0..2 {
        c.b0[s * 5 + 4] = 100.0;
    }
    assert_eq!(c.norm(&grid), 0.0);
}

#[test]
fn csv_export_is_deterministic() {
    let spec = catalog::lq_weak_coupling();
    let cfg = SolverConfig { n_steps: 5, n_scenarios: 2, n_particles: 3, ..SolverConfig::default() };
    let bundle = bundle_for(&spec, &cfg);
    let f = solve_coupled_picard(&spec, &bundle, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = write_field_csv(&dir.path().join("a"), "", &f, None).unwrap();
    let b = write_field_csv(&dir.path().join("b"), "", &f, Some(2)).unwrap();
    assert_eq!(a.len(), 9);
    let x0 = std::fs::read_to_string(&a[0]).unwrap();
    assert!(x0.starts_with(&format!("# mfg field csv schema v{CSV_SCHEMA_VERSION}\nscenario,particle,step,time,value\n")));
    assert_eq!(x0.lines().count(), 2 + 2 * 6);
    assert_eq!(x0, std::fs::read_to_string(&b[0]).unwrap());
    let x = std::fs::read_to_string(&b[4]).unwrap();
    assert_eq!(x.lines().count(), 2 + 2 * 2 * 6);
    write_manifest(&dir.path().join("m.txt"), "seed = 1", Some(&f)).unwrap();
    let m = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
    assert!(m.contains("seed = 1") && m.contains("residuals = ["));
}

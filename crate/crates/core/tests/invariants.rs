use mfg_core::catalog;
use mfg_core::hamiltonian::{hamiltonian_major, hamiltonian_minor, minimize_major, minimize_minor, MajorAdjoint, MinorAdjoint};
use mfg_core::model::monotonicity_pairing;
use mfg_core::stochastics::{pairing_bound_check, w2_distance_empirical, ParticleEnsemble};
use proptest::collection::vec;
use proptest::prelude::*;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn sample(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn w2_matches_brute_force((a, b) in (1usize..=6).prop_flat_map(|n| (sample(n..n + 1), sample(n..n + 1)))) {
        let brute = permutations(a.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).powi(2)).sum::<f64>() / a.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let w2 = w2_distance_empirical(&a, &b).unwrap().powi(2);
        prop_assert!((w2 - brute).abs() <= 1e-12 * (1.0 + brute));
    }

    #[test]
    fn w2_is_a_metric((a, b, c) in (1usize..40).prop_flat_map(|n| (sample(n..n + 1), sample(n..n + 1), sample(n..n + 1)))) {
        let d = |x: &[f64], y: &[f64]| w2_distance_empirical(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        let mut rev = a.clone();
        rev.reverse();
        prop_assert_eq!(d(&a, &b), d(&rev, &b));
    }

    #[test]
    fn w2_never_exceeds_the_paired_mse((a, b) in (1usize..64).prop_flat_map(|n| (sample(n..n + 1), sample(n..n + 1)))) {
        let (w2, paired) = pairing_bound_check(
            &ParticleEnsemble::new(3, a).unwrap(),
            &ParticleEnsemble::new(3, b).unwrap(),
        ).unwrap();
        prop_assert!(w2 <= paired + 1e-12 * (1.0 + paired));
    }

    #[test]
    fn minimizers_beat_alternatives(
        t in 0.0f64..1.0, x0 in -3.0f64..3.0, x in -3.0f64..3.0,
        p0 in -3.0f64..3.0, q0 in -3.0f64..3.0, p in -3.0f64..3.0, q in -3.0f64..3.0, qt in -3.0f64..3.0,
        states in sample(1..20), v in -10.0f64..10.0, which in 0usize..3,
    ) {
        let spec = &catalog::lq_catalog()[which];
        let m = spec.summarize(t, &states);
        let adj0 = MajorAdjoint { p0, q0 };
        let u0 = minimize_major(t, x0, adj0, &m, spec).unwrap();
        let h0 = hamiltonian_major(t, x0, adj0, u0, &m, spec).unwrap();
        prop_assert!(h0 <= hamiltonian_major(t, x0, adj0, v, &m, spec).unwrap() + 1e-10 * (1.0 + h0.abs()));
        let adj = MinorAdjoint { p, q, q_tilde: qt };
        let u = minimize_minor(t, x, adj, x0, spec).unwrap();
        let h = hamiltonian_minor(t, x, adj, u, x0, &m, spec).unwrap();
        prop_assert!(h <= hamiltonian_minor(t, x, adj, v, x0, &m, spec).unwrap() + 1e-10 * (1.0 + h.abs()));
    }

    #[test]
    fn quadratic_minor_minimizer_has_closed_form(t in 0.0f64..1.0, x in -3.0f64..3.0, p in -3.0f64..3.0, x0 in -3.0f64..3.0) {
        let spec = catalog::lq_weak_coupling();
        let lq = spec.lq.unwrap();
        let u = minimize_minor(t, x, MinorAdjoint { p, q: 0.0, q_tilde: 0.0 }, x0, &spec).unwrap();
        let want = -lq.minor.c * p / lq.minor.r;
        prop_assert!((u - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn pairing_is_nonnegative_on_the_catalog(t in 0.0f64..1.0, x0 in -2.0f64..2.0, (a, b) in (2usize..30).prop_flat_map(|n| (sample(n..n + 1), sample(n..n + 1)))) {
        for spec in catalog::lq_catalog() {
            let (vf, vg) = monotonicity_pairing(&spec, t, x0, &a, &b).unwrap();
            prop_assert!(vf >= -1e-9 && vg >= -1e-9, "{}: {} {}", spec.name, vf, vg);
        }
    }
}

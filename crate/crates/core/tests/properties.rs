use plsp::gmm::{moment_vector, Theta};
use plsp::kernel::{cv_select, KernelWeights};
use plsp::profile::{ProfileContext, ScoringConfig};
use plsp::simulation::{generate_scenario, run_replications, Case, ScenarioConfig};
use plsp::spatial::{build_knn_weights, sar_variance, Coordinates, SarVariance};
use plsp::{Bandwidth, Dataset, FitOptions, Method};
use proptest::prelude::*;

fn coords(raw: &[(f64, f64)]) -> Option<Coordinates> {
    let mut pts: Vec<[f64; 2]> = raw.iter().map(|&(a, b)| [a, b]).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() != raw.len() {
        return None;
    }
    Coordinates::new(raw.iter().map(|&(a, b)| [a, b]).collect()).ok()
}

fn toy_data(n: usize, seed: u64) -> (Dataset, plsp::WeightMatrix) {
    let mut cfg = ScenarioConfig::new(Case::Two, 0.3, 1, seed);
    cfg.n = n;
    generate_scenario(&cfg, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_rows_are_stochastic(raw in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 8..40), k in 1usize..7) {
        let Some(c) = coords(&raw) else { return Ok(()) };
        let w = build_knn_weights(&c, k, true).unwrap();
        for i in 0..raw.len() {
            let row: Vec<(usize, f64)> = w.row(i).collect();
            prop_assert_eq!(row.len(), k);
            prop_assert!(row.iter().all(|&(j, _)| j != i));
            let sum: f64 = row.iter().map(|r| r.1).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn sar_variance_positive_and_derivative_exact(
        raw in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 10..25),
        k in 2usize..6,
        lambda in -0.9f64..0.9,
    ) {
        let Some(c) = coords(&raw) else { return Ok(()) };
        let w = build_knn_weights(&c, k, true).unwrap();
        let sv = sar_variance(&w, lambda).unwrap();
        prop_assert!(sv.v.iter().all(|v| v.is_finite() && *v > 0.0));
        let h = 1e-5;
        let (up, dn) = (sar_variance(&w, lambda + h).unwrap(), sar_variance(&w, lambda - h).unwrap());
        let fd: Vec<f64> = up.v.iter().zip(&dn.v).map(|(u, d)| (u - d) / (2.0 * h)).collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, f) in sv.v_prime.iter().zip(&fd) {
            prop_assert!((a - f).abs() <= 1e-6 * scale.max(1e-12), "{} vs {}", a, f);
        }
    }

    #[test]
    fn cv_selection_ignores_order_and_scale(
        pairs in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0), 12..40),
        rot in 0usize..40,
    ) {
        let zs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let rs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let Ok(b) = cv_select(&zs, &rs) else { return Ok(()) };
        let r = rot % zs.len();
        let (mut zp, mut rp) = (zs.clone(), rs.clone());
        zp.rotate_left(r);
        rp.rotate_left(r);
        zp.reverse();
        rp.reverse();
        // sigma_Z, and so the grid, depends on summation order at the last bit.
        let bp = cv_select(&zp, &rp).unwrap().value();
        prop_assert!((bp - b.value()).abs() <= 1e-12 * b.value(), "{} vs {}", bp, b.value());
        let doubled: Vec<f64> = rs.iter().map(|v| 2.0 * v).collect();
        prop_assert_eq!(cv_select(&zs, &doubled).unwrap(), b);
    }

    #[test]
    fn profile_shift_equivariance_and_root(seed in 0u64..1000, c in -1.0f64..1.0, qi in 0usize..60) {
        let (data, _) = toy_data(60, seed);
        let b = Bandwidth::new(0.6).unwrap();
        let sv = SarVariance::independent(60);
        let z = data.z()[qi];
        let kw = KernelWeights::new(z, data.z(), b);
        let cfg = ScoringConfig { tol: 1e-12, max_iter: 200, ..ScoringConfig::default() };

        let theta = Theta::new(vec![-1.0, 1.0], 0.0).unwrap();
        let ctx = ProfileContext::new(&theta, &data, &sv).unwrap();
        let fit = ctx.solve(z, &kw.weights, &cfg).unwrap();
        prop_assert_eq!(fit.grad_lambda, 0.0);
        prop_assert!(ctx.score(fit.eta, &kw.weights).abs() <= 1e-6 * kw.mass());

        // Lowering x2 (beta2 = 1) by c lowers every linear index by c, so eta rises by c.
        let shifted_x: Vec<f64> = data.x().chunks(2).flat_map(|r| [r[0], r[1] - c]).collect();
        let shifted = Dataset::new(data.y().to_vec(), shifted_x, 2, data.z().to_vec()).unwrap();
        let ctx2 = ProfileContext::new(&theta, &shifted, &sv).unwrap();
        let fit2 = ctx2.solve(z, &kw.weights, &cfg).unwrap();
        prop_assert!((fit2.eta - (fit.eta + c)).abs() <= 1e-8, "{} vs {}", fit2.eta, fit.eta + c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn criterion_is_squared_norm_and_order_free(
        seed in 0u64..1000,
        b1 in -2.0f64..0.0,
        b2 in 0.0f64..2.0,
        lambda in -0.8f64..0.8,
        shift in 1usize..50,
    ) {
        let (data, w) = toy_data(50, seed);
        let b = Bandwidth::new(0.5).unwrap();
        let theta = Theta::new(vec![b1, b2], lambda).unwrap();
        let cfg = ScoringConfig::default();
        let m = moment_vector(&theta, &data, &w, b, &cfg).unwrap();
        prop_assert!(m.q_value >= 0.0);
        prop_assert_eq!(m.q_value, m.s.iter().map(|s| s * s).sum::<f64>());

        let perm: Vec<usize> = (0..50).map(|i| (i + shift) % 50).collect();
        let (dp, wp) = (data.permuted(&perm).unwrap(), w.permuted(&perm).unwrap());
        let mp = moment_vector(&theta, &dp, &wp, b, &cfg).unwrap();
        for (a, c) in m.s.iter().zip(&mp.s) {
            prop_assert!((a - c).abs() <= 1e-12, "{} vs {}", a, c);
        }
    }

    #[test]
    fn scenarios_depend_only_on_seed_and_rep(seed in any::<u64>(), rep in 0usize..100) {
        let cfg = ScenarioConfig::new(Case::One, -0.4, 100, seed);
        let (d1, w1) = generate_scenario(&cfg, rep).unwrap();
        let (d2, w2) = generate_scenario(&cfg, rep).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(w1, w2);
    }
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let (data, _) = toy_data(40, 9);
    let text = data.to_csv().unwrap();
    let back = Dataset::from_csv(text.as_bytes()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn dropping_a_method_leaves_others_unchanged() {
    let mut cfg = ScenarioConfig::new(Case::Two, 0.3, 2, 21);
    cfg.n = 60;
    let both = run_replications(&cfg, &[Method::Plpm, Method::Lsaep], &FitOptions::default()).unwrap();
    let alone = run_replications(&cfg, &[Method::Plpm], &FitOptions::default()).unwrap();
    for (a, b) in both.records.iter().zip(&alone.records) {
        assert_eq!(a.methods[&Method::Plpm], b.methods[&Method::Plpm]);
    }
}

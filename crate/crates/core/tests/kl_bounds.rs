mod common;

use std::f64::consts::PI;

use common::{kl_inverse_grid, kl_ref};
use fpcert::bounds::*;
use fpcert::kl::*;
use fpcert::rng::Stream;
use fpcert::Error;
use proptest::prelude::*;

#[test]
fn kl_endpoints_and_symmetry_cases() {
    assert_eq!(bernoulli_kl(0.3, 0.3).unwrap(), 0.0);
    assert!(matches!(bernoulli_kl(0.5, 0.0), Err(Error::InfiniteDivergence { .. })));
    assert!(matches!(bernoulli_kl(0.5, 1.0), Err(Error::InfiniteDivergence { .. })));
    assert_eq!(bernoulli_kl(0.0, 0.0).unwrap(), 0.0);
    assert!(matches!(bernoulli_kl(1.2, 0.5), Err(Error::Domain(_))));
    assert!((bernoulli_kl(0.0, 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((BernoulliPair { q: 0.1, p: 0.4 }.kl().unwrap() - kl_ref(0.1, 0.4)).abs() < 1e-15);
}

#[test]
fn kl_inverse_edge_cases() {
    assert_eq!(kl_inverse(0.2, 0.0), 0.2);
    assert_eq!(kl_inverse(0.2, -1.0), 0.2);
    assert_eq!(kl_inverse(1.0, 0.5), 1.0);
    assert_eq!(kl_inverse(0.2, 1e6), 1.0);
    // kl(0 || p) = -log(1 - p)
    let c = 0.05f64;
    assert!((kl_inverse(0.0, c) - (1.0 - (-c).exp())).abs() < 1e-11);
    assert!(matches!(kl_inverse_grad(0.0, 0.1), Err(Error::NonDifferentiable { .. })));
    assert!(matches!(kl_inverse_grad(0.3, 0.0), Err(Error::NonDifferentiable { .. })));
}

#[test]
fn gaussian_kl_matches_direct_sum() {
    let mut s = Stream::new(4);
    let p = 7;
    let spec = GroupedGaussianSpec {
        w: (0..p).map(|_| s.normal()).collect(),
        s: (0..p).map(|_| s.uniform_range(0.1, 2.0)).collect(),
        w0: (0..p).map(|_| s.normal()).collect(),
        partition: Partition::from_sizes(&[3, 4]),
        lambda: vec![0.7, 1.9],
    };
    let mut direct = 0.0;
    for i in 0..p {
        let l = if i < 3 { 0.7 } else { 1.9 };
        let d = spec.w[i] - spec.w0[i];
        direct += 0.5 * (spec.s[i] / l + d * d / l - 1.0 + (l / spec.s[i]).ln());
    }
    assert!((gaussian_kl_grouped(&spec).unwrap() - direct).abs() < 1e-12);
    let mut bad = spec.clone();
    bad.partition = Partition { groups: vec![vec![0, 1, 2], vec![2, 3, 4, 5]] };
    assert!(gaussian_kl_grouped(&bad).is_err());
}

#[test]
fn sample_convergence_examples() {
    let b = sample_convergence_bound(0.0, 100, 0.01).unwrap();
    assert!((b - (1.0 - 200f64.powf(-0.01))).abs() < 1e-11);
    assert!((b - 0.0516).abs() < 1e-3);
    let b = sample_convergence_bound(0.2, 1000, 1e-4).unwrap();
    assert!((b - kl_inverse_grid(0.2, (2e4f64).ln() / 1000.0)).abs() < 1e-9);
    assert!(b > 0.2);
    assert!(sample_convergence_bound(0.1, 0, 0.1).is_err());
    assert!(sample_convergence_bound(0.1, 10, 1.0).is_err());
}

#[test]
fn maurer_examples() {
    let b = maurer_bound(0.0, 100, 0.0, 0.05).unwrap();
    assert!((b - (1.0 - 400f64.powf(-0.01))).abs() < 1e-11);
    assert!(b < maurer_bound(0.0, 100, 0.1, 0.05).unwrap());
    assert!(matches!(maurer_bound(0.1, 7, 1.0, 0.05), Err(Error::Precondition(_))));
    let n = 50_000f64;
    let c = (10.0 + (2.0 * n.sqrt() / 1e-5).ln()) / n;
    let b = maurer_bound(0.1, 50_000, 10.0, 1e-5).unwrap();
    assert!((b - kl_inverse_grid(0.1, c)).abs() < 1e-9);
}

#[test]
fn regularizer_closed_form() {
    let grid = PriorGridSpec { lambda_max: 100.0, b: 100.0 };
    let lam = grid.value_at(1.0);
    let spec = GroupedGaussianSpec {
        w: vec![0.3, -0.2],
        s: vec![lam, lam],
        w0: vec![0.3, -0.2],
        partition: Partition::from_sizes(&[2]),
        lambda: vec![lam],
    };
    let n = 10_000.0f64;
    let expect = ((PI * PI / 6.0).ln() + (2.0 * 100.0 / 1e-5f64).ln()) / n;
    assert!((regularizer_b(&spec, &grid, 10_000, 1e-5).unwrap() - expect).abs() < 1e-15);

    let mut off = spec.clone();
    off.lambda = vec![37.0];
    assert!(matches!(regularizer_b(&off, &grid, 10_000, 1e-5), Err(Error::Domain(_))));
    off.lambda = vec![100.0];
    assert!(matches!(regularizer_b(&off, &grid, 10_000, 1e-5), Err(Error::Domain(_))));
}

#[test]
fn regularizer_term_by_term() {
    let mut s = Stream::new(11);
    let grid = PriorGridSpec { lambda_max: 50.0, b: 20.0 };
    let a = [3.0, 7.0, 1.0];
    let lambda: Vec<f64> = a.iter().map(|&ai| grid.value_at(ai)).collect();
    let sizes = [2, 3, 4];
    let p = 9;
    let spec = GroupedGaussianSpec {
        w: (0..p).map(|_| s.normal()).collect(),
        s: (0..p).map(|_| s.uniform_range(0.01, 1.0)).collect(),
        w0: (0..p).map(|_| s.normal()).collect(),
        partition: Partition::from_sizes(&sizes),
        lambda: lambda.clone(),
    };
    let n = 500usize;
    let delta = 0.01;
    let mut kl = 0.0;
    let mut idx = 0;
    for (j, &sz) in sizes.iter().enumerate() {
        for _ in 0..sz {
            let d = spec.w[idx] - spec.w0[idx];
            kl += 0.5 * ((lambda[j] / spec.s[idx]).ln() + (spec.s[idx] + d * d) / lambda[j] - 1.0);
            idx += 1;
        }
    }
    let mut expect = kl;
    for ai in a {
        expect += 2.0 * ai.ln();
    }
    expect += 3.0 * (PI * PI / 6.0).ln() + (2.0 * (n as f64).sqrt() / delta).ln();
    expect /= n as f64;
    assert!((regularizer_b(&spec, &grid, n, delta).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn round_prior_examples() {
    let grid = PriorGridSpec { lambda_max: 100.0, b: 100.0 };
    let on = grid.value_at(3.0);
    assert_eq!(round_prior(&[on], &grid), vec![on]);
    let r = round_prior(&[37.0], &grid)[0];
    assert!((r - 100.0 * (-0.99f64).exp()).abs() < 1e-12);
    assert!((r - 37.157).abs() < 1e-3);
    assert_eq!(round_prior(&[250.0], &grid), vec![grid.value_at(1.0)]);
    assert_eq!(round_prior(&[99.9999], &grid), vec![grid.value_at(1.0)]);
    assert_eq!(grid.indices(&[r, on]).unwrap(), vec![99, 3]);
}

#[test]
fn delta_a_product() {
    let d = delta_a(&[1, 2], 1e-3);
    assert!((d - 1e-3 * (6.0 / (PI * PI)) * (6.0 / (4.0 * PI * PI))).abs() < 1e-18);
    assert_eq!(delta_a(&[], 0.1), 0.1);
}

#[test]
fn generalization_bound_examples() {
    let b = 0.3f64;
    assert!((generalization_bound(0.0, b) - (1.0 - (-b).exp())).abs() < 1e-11);
    assert_eq!(generalization_bound(0.2, 0.0), 0.2);
    assert!((generalization_bound(0.15, 0.05) - kl_inverse_grid(0.15, 0.05)).abs() < 1e-9);
    let c = kl_inverse_budget(1e-5, 20_000).unwrap();
    let r_bar = kl_inverse(0.0, c);
    assert!((r_bar - (1.0 - (-(2e5f64).ln() / 2e4).exp())).abs() < 1e-12);
    assert!((r_bar - 6.1e-4).abs() < 1e-5);
}

#[test]
fn confidence_ledger_values() {
    let (r, _) = confidence_ledger(1e-5, 1e-5, 6, 1).unwrap();
    assert_eq!(format!("{r:.10}"), "0.9998800000");
    let (_, q) = confidence_ledger(1e-4, 0.0, 1, 81).unwrap();
    assert_eq!(format!("{q:.10}"), "0.9919000000");
    let (r6, q) = confidence_ledger(1e-5, 1e-5, 6, 81).unwrap();
    assert_eq!(format!("{q:.10}"), "0.9902800000");
    assert_eq!(r6, r);
    assert!(matches!(confidence_ledger(0.01, 0.0, 1, 100), Err(Error::Budget(_))));
    let (r1, _) = confidence_ledger(1e-5, 1e-5, 1, 81).unwrap();
    assert_eq!(r1, 1.0 - 2e-5);
    let l = ConfidenceLedger::for_learned(1e-5, 1e-5, 6, 81);
    let text = l.render();
    assert!(text.contains("total") && text.contains("confidence\t0.990280000000"));
}

#[test]
fn quantile_from_grid_examples() {
    let t = [0.1, 1.0, 10.0];
    assert_eq!(quantile_from_grid(&t, &[0.5, 0.08, 0.01], 0.9).unwrap(), Some(1.0));
    assert_eq!(quantile_from_grid(&t, &[0.5, 0.4, 0.3], 0.9).unwrap(), None);
    assert!(quantile_from_grid(&[], &[], 0.5).is_err());
}

#[test]
fn worst_case_rate_examples() {
    assert_eq!(worst_case_rate(RateKind::Averaged, 0.5, 0).unwrap(), 2.0);
    assert!((worst_case_rate(RateKind::Averaged, 0.5, 1).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(worst_case_rate(RateKind::Linear, 0.9, 0).unwrap(), 2.0);
    assert!(worst_case_rate(RateKind::Linear, 1.0, 3).is_err());
    assert!(worst_case_rate(RateKind::Averaged, 0.4, 3).is_err());
    assert_eq!(combine_with_worst_case(0.05, 0.001, 10.0, 1.0), 0.0);
    assert_eq!(combine_with_worst_case(0.05, 1.0, 10.0, 1.0), 0.05);
}

#[test]
fn combined_curve_switches_regime() {
    let dist = 3.0;
    let eps = 0.05;
    let mut switched = None;
    for k in 0..80 {
        let wc = worst_case_rate(RateKind::Linear, 0.9, k).unwrap() * dist;
        let c = combine_with_worst_case(0.3, wc / dist, dist, eps);
        let expect = if wc < eps { 0.0 } else { 0.3 };
        assert_eq!(c, expect, "k={k}");
        if c == 0.0 && switched.is_none() {
            switched = Some(k);
        }
        if let Some(s) = switched {
            assert!(k < s || c == 0.0);
        }
    }
    let k0 = switched.unwrap();
    assert!(2.0 * 0.9f64.powi(k0 as i32) * dist < eps && 2.0 * 0.9f64.powi(k0 as i32 - 1) * dist >= eps);
}

proptest! {
    #[test]
    fn kl_inverse_is_the_supremum(q in 0.0f64..0.999, c in 1e-6f64..3.0) {
        let p = kl_inverse(q, c);
        prop_assert!(p >= q);
        prop_assert!(p <= pinsker_upper(q, c).min(1.0) + 1e-12);
        if p < 1.0 - 1e-6 {
            prop_assert!((kl_ref(q, p) - c).abs() < 1e-8);
        }
    }

    #[test]
    fn kl_inverse_monotone(q in 0.0f64..0.99, c in 1e-6f64..2.0, dq in 0.0f64..0.01, dc in 0.0f64..0.5) {
        prop_assert!(kl_inverse(q, c) <= kl_inverse(q, c + dc) + 1e-12);
        prop_assert!(kl_inverse(q, c) <= kl_inverse((q + dq).min(1.0), c) + 1e-12);
    }

    #[test]
    fn quantile_matches_scan(seed in 0u64..10_000, q in 0.05f64..0.95) {
        let mut s = Stream::new(seed);
        let n = 1 + s.below(40) as usize;
        let tol: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let mut b: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        b.sort_by(|x, y| y.total_cmp(x));
        let mut expect = None;
        for i in 0..n {
            if b[i] <= 1.0 - q {
                expect = Some(tol[i]);
                break;
            }
        }
        prop_assert_eq!(quantile_from_grid(&tol, &b, q).unwrap(), expect);
    }

    #[test]
    fn averaged_rate_covers_both_regimes(alpha in 0.5f64..0.999, k in 0usize..200) {
        let r = worst_case_rate(RateKind::Averaged, alpha, k).unwrap();
        prop_assert!(r.is_finite() && r > 0.0);
        prop_assert!(r <= 2.0 + 1e-12);
    }
}

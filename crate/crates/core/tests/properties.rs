// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use windtl::csge::soft_gate;
use windtl::preselect::wasserstein1;

/// Optimal 1-D transport between equal-size samples by enumerating every
/// matching.
fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, a: &[f64], b: &[f64], best: &mut f64) {
        if k == perm.len() {
            let cost: f64 = perm.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum();
            *best = best.min(cost);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, a, b, &mut best);
    best / a.len() as f64
}

fn equal_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantile_estimator_is_optimal_transport((a, b) in equal_pair()) {
        let w = wasserstein1(&a, &b).unwrap();
        prop_assert!((w - brute_force_w1(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn integer_shift_is_exact(a in prop::collection::vec(-1000i32..1000, 1..40), c in -500i32..500) {
        let x: Vec<f64> = a.iter().map(|v| f64::from(*v)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + f64::from(c)).collect();
        prop_assert_eq!(wasserstein1(&x, &y).unwrap(), f64::from(c.abs()));
    }

    #[test]
    fn symmetric_and_triangular(
        (a, b, c) in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )),
    ) {
        let ab = wasserstein1(&a, &b).unwrap();
        prop_assert_eq!(ab, wasserstein1(&b, &a).unwrap());
        let ac = wasserstein1(&a, &c).unwrap();
        let cb = wasserstein1(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn gate_lies_on_simplex_and_is_monotone(
        errors in prop::collection::vec(0.0f64..10.0, 1..12),
        eta in 0.01f64..6.0,
    ) {
        let w = soft_gate(&errors, eta, 1e-6);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|x| *x > 0.0));
        for i in 0..errors.len() {
            for j in 0..errors.len() {
                if errors[i] < errors[j] {
                    prop_assert!(w[i] > w[j], "{:?} -> {:?}", errors, w);
                }
            }
        }
    }

    #[test]
    fn zero_exponent_is_uniform(errors in prop::collection::vec(0.0f64..10.0, 1..12)) {
        let w = soft_gate(&errors, 0.0, 1e-6);
        let u = 1.0 / errors.len() as f64;
        prop_assert!(w.iter().all(|x| (x - u).abs() <= 1e-12));
    }
}

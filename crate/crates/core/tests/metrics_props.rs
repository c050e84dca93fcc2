use std::collections::BTreeSet;

use modalreg::eigen::dominant_groups;
use modalreg::metrics::{mae, misclassification, whe};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn whe_is_symmetric((a, b) in vecs()) {
        prop_assert_eq!(whe(&a, &b).unwrap(), whe(&b, &a).unwrap());
    }

    #[test]
    fn whe_is_scale_free(a in prop::collection::vec(1e-3f64..1e3, 1..30), neg in prop::collection::vec(any::<bool>(), 30), c in 1.0f64..100.0) {
        let a: Vec<f64> = a.iter().zip(&neg).map(|(v, n)| if *n { -v } else { *v }).collect();
        let b: Vec<f64> = a.iter().map(|v| c * v).collect();
        prop_assert!((whe(&a, &b).unwrap() - (1.0 - 1.0 / c)).abs() <= 1e-12);
    }

    #[test]
    fn whe_is_bounded((a, b) in vecs()) {
        let w = whe(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&w));
    }

    #[test]
    fn mae_below_max_deviation((a, b) in vecs()) {
        let m = mae(&a, &b).unwrap();
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(m <= worst + 1e-12);
    }

    /// Perturbations smaller than every entry's distance to the threshold leave the
    /// dominant groups unchanged.
    #[test]
    fn classification_stable_under_small_perturbation(
        raw in prop::collection::vec(0.0f64..1.0, 36),
        noise in prop::collection::vec(-1.0f64..1.0, 36),
    ) {
        let n = 6;
        let labels: Vec<String> = (0..n).map(|i| format!("g{}", i % 3)).collect();
        let mut p = DMatrix::from_column_slice(n, n, &raw);
        for j in 0..n {
            let mx = p.column(j).max();
            if mx > 0.0 {
                p.column_mut(j).scale_mut(1.0 / mx);
            }
        }
        let margin = p.iter().map(|v| (v - 0.3).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-6);
        let q = DMatrix::from_fn(n, n, |i, j| p[(i, j)] + 0.5 * margin * noise[j * n + i]);
        let truth = dominant_groups(&p, &labels, 0.3).unwrap();
        let pred = dominant_groups(&q, &labels, 0.3).unwrap();
        prop_assert_eq!(misclassification(&truth, &pred).unwrap(), 0.0);
    }
}

#[test]
fn misclassification_counts_set_mismatches() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    let truth = vec![s(&["a"]), s(&["a", "b"]), s(&[])];
    let pred = vec![s(&["a"]), s(&["a"]), s(&[])];
    assert!((misclassification(&truth, &pred).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

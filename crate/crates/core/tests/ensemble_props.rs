mod common;

use modalreg::ensemble::{fit_bagging, EnsembleParams};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(n_trees: usize, seed: u64) -> EnsembleParams {
    EnsembleParams {
        n_trees,
        seed,
        ..EnsembleParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn prediction_within_member_range(seed in any::<u64>(), n in 5usize..80, probe in prop::collection::vec(0.0f64..1.0, 2)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = common::random_data(&mut rng, n, 2, 3);
        let e = fit_bagging(&x, &y, &params(7, seed)).unwrap();
        let p = e.predict(&probe).unwrap();
        for (k, v) in p.iter().enumerate() {
            let members: Vec<f64> = (0..7).map(|t| e.member_prediction(t, &probe)[k]).collect();
            let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}

#[test]
fn more_trees_reduce_rerun_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (x, y) = common::random_data(&mut rng, 300, 2, 1);
    let probes: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let reruns = 12;
    let variance = |n_trees: usize| -> Vec<f64> {
        let preds: Vec<DMatrix<f64>> = (0..reruns)
            .map(|r| {
                let e = fit_bagging(&x, &y, &params(n_trees, 1000 + r as u64)).unwrap();
                DMatrix::from_fn(probes.len(), 1, |i, _| e.predict(&probes[i]).unwrap()[0])
            })
            .collect();
        (0..probes.len())
            .map(|i| {
                let v: Vec<f64> = preds.iter().map(|p| p[(i, 0)]).collect();
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            })
            .collect()
    };
    let v5 = variance(5);
    let v50 = variance(50);
    let lower = v5.iter().zip(&v50).filter(|(a, b)| b < a).count();
    println!("variance(50) < variance(5) on {lower}/{} probes", probes.len());
    assert!(lower as f64 >= 0.9 * probes.len() as f64);
}

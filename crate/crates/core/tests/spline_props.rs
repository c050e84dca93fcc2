use modalreg::spline::{
    self, approximate_1d, fit_2d_ordered, fit_family_1d, fit_family_2d, interpolate_1d, least_squares, FitOrder,
    KnotVector, SplineKind, SplineSettings,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorted, strictly increasing sites with gaps of at least `min_gap`.
fn sites(rng: &mut ChaCha8Rng, n: usize, min_gap: f64) -> Vec<f64> {
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x += min_gap + rng.random_range(0.0..1.0);
            x
        })
        .collect()
}

/// Random clamped knot vector, possibly with repeated interior knots.
fn random_knots(rng: &mut ChaCha8Rng) -> KnotVector {
    let k: usize = rng.random_range(1..=6);
    let n_int = rng.random_range(0..12);
    let mut interior: Vec<f64> = (0..n_int).map(|_| (rng.random_range(1..40) as f64) / 40.0).collect();
    interior.sort_by(f64::total_cmp);
    // at most k - 1 repeats keep the spline space well defined
    let mut kept: Vec<f64> = Vec::new();
    for t in interior {
        if kept.iter().filter(|&&u| u == t).count() < k.saturating_sub(1).max(1) {
            kept.push(t);
        }
    }
    let mut knots = vec![0.0; k];
    knots.extend(kept);
    knots.extend(vec![1.0; k]);
    KnotVector::new(knots, k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partition_of_unity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kv = random_knots(&mut rng);
        for _ in 0..1000 {
            let x = rng.random_range(0.0..=1.0);
            let s: f64 = kv.basis_row(x).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "sum {s} at {x}");
        }
    }

    #[test]
    fn interpolant_hits_data(seed in any::<u64>(), n in 4usize..60, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = sites(&mut rng, n, 0.05);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = interpolate_1d(&xs, &ys, k).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!((c.eval(*x).unwrap() - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn least_squares_reproduces_low_degree(seed in any::<u64>(), n in 12usize..80, k in 2usize..5, segs in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = sites(&mut rng, n, 0.02);
        let (a, b) = (xs[0], xs[n - 1]);
        let xs: Vec<f64> = xs.iter().map(|x| (x - a) / (b - a)).collect();
        let coef: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let poly = |x: f64| coef.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let ys: Vec<f64> = xs.iter().map(|&x| poly(x)).collect();
        let c = approximate_1d(&xs, &ys, segs, k, false).unwrap();
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            prop_assert!((c.eval(x).unwrap() - poly(x)).abs() <= 1e-9);
        }
    }

    #[test]
    fn square_fit_residual_not_worse_than_interpolation(seed in any::<u64>(), n in 4usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = sites(&mut rng, n, 0.1);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let li = interpolate_1d(&xs, &ys, 4).unwrap();
        let la = least_squares(&li.knots, &xs, &ys).unwrap();
        let r_li = spline::sse(&li, &xs, &ys).unwrap();
        let r_la = spline::sse(&la, &xs, &ys).unwrap();
        prop_assert!(r_la <= r_li + 1e-18);
    }

    #[test]
    fn two_step_order_does_not_matter(seed in any::<u64>(), nx in 6usize..25, ny in 5usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = sites(&mut rng, nx, 0.05);
        let ys = sites(&mut rng, ny, 0.05);
        let z: Vec<Vec<f64>> = (0..nx).map(|_| (0..ny).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let kx = KnotVector::uniform(xs[0], xs[nx - 1], (nx / 3).max(1), 4).unwrap();
        let ky = KnotVector::uniform(ys[0], ys[ny - 1], (ny / 3).max(1), 3).unwrap();
        let a = fit_2d_ordered(&xs, &ys, &z, &kx, &ky, FitOrder::XThenY).unwrap();
        let b = fit_2d_ordered(&xs, &ys, &z, &kx, &ky, FitOrder::YThenX).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let x = (xs[0] + (xs[nx - 1] - xs[0]) * i as f64 / 19.0).min(xs[nx - 1]);
                let y = (ys[0] + (ys[ny - 1] - ys[0]) * j as f64 / 19.0).min(ys[ny - 1]);
                let (u, v) = (a.eval(x, y).unwrap(), b.eval(x, y).unwrap());
                prop_assert!((u - v).abs() <= 1e-8, "{u} vs {v}");
            }
        }
    }
}

/// Grid data over (swept, other1, other2) with a smooth response.
fn family_grid() -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let sw: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
    let o1 = vec![0.1, 0.3, 0.7, 1.0];
    let o2 = vec![-1.0, 0.0, 2.0];
    let mut rows = Vec::new();
    for &a in &o1 {
        for &b in &o2 {
            for &s in &sw {
                rows.push([a, b, s]);
            }
        }
    }
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let y = rows.iter().map(|r| (3.0 * r[2] + r[0]).sin() * (1.0 + 0.2 * r[1]) + r[0] * r[1]).collect();
    (x, y, o1, o2)
}

#[test]
fn family_is_continuous_across_brackets() {
    let (x, y, o1, o2) = family_grid();
    let names: Vec<String> = ["a", "b", "s"].iter().map(|s| s.to_string()).collect();
    let settings = SplineSettings::default();
    let fams = [
        fit_family_1d(&x, &y, &names, 2, SplineKind::Li1d, &settings).unwrap(),
        fit_family_1d(&x, &y, &names, 2, SplineKind::La1d, &settings).unwrap(),
        fit_family_2d(&x, &y, &names, 2, 1, &settings).unwrap(),
    ];
    let eps = 1e-13;
    for fam in &fams {
        for s in [0.0, 0.33, 0.5, 0.91, 1.0] {
            for &a in &o1[1..o1.len() - 1] {
                for &b in &o2 {
                    let at = fam.predict(&[a, b, s], false).unwrap();
                    let lo = fam.predict(&[a - eps, b, s], false).unwrap();
                    let hi = fam.predict(&[a + eps, b, s], false).unwrap();
                    assert!((at - lo).abs() <= 1e-10 && (at - hi).abs() <= 1e-10, "{:?} a={a}", fam.kind);
                }
            }
            let b = o2[1];
            let at = fam.predict(&[0.5, b, s], false).unwrap();
            let lo = fam.predict(&[0.5, b - eps, s], false).unwrap();
            let hi = fam.predict(&[0.5, b + eps, s], false).unwrap();
            assert!((at - lo).abs() <= 1e-10 && (at - hi).abs() <= 1e-10);
        }
    }
}

#[test]
fn family_outside_hull_is_rejected_unless_allowed() {
    let (x, y, _, _) = family_grid();
    let names: Vec<String> = ["a", "b", "s"].iter().map(|s| s.to_string()).collect();
    let fam = fit_family_1d(&x, &y, &names, 2, SplineKind::Li1d, &SplineSettings::default()).unwrap();
    assert!(fam.predict(&[1.5, 0.0, 0.5], false).is_err());
    assert!(fam.predict(&[0.5, 0.0, 1.5], false).is_err());
    let clamped = fam.predict(&[1.5, 0.0, 0.5], true).unwrap();
    assert_eq!(clamped, fam.predict(&[1.0, 0.0, 0.5], false).unwrap());
}

use modalreg::eigen::{eigenvalues, eigenvectors, raw_participation, track_poles, is_permutation};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Monic characteristic polynomial coefficients (highest degree first) of an upper
/// Hessenberg matrix, by the La Budde/Hyman column recurrence.
fn charpoly_hessenberg(h: &DMatrix<f64>) -> Vec<f64> {
    let n = h.nrows();
    // polys[k] has degree k, stored lowest degree first
    let mut polys: Vec<Vec<f64>> = vec![vec![1.0]];
    for k in 0..n {
        let prev = &polys[k];
        let mut next = vec![0.0; k + 2];
        for (d, &c) in prev.iter().enumerate() {
            next[d + 1] += c;
            next[d] -= h[(k, k)] * c;
        }
        let mut prod = 1.0;
        for i in (0..k).rev() {
            prod *= h[(i + 1, i)];
            let coef = h[(i, k)] * prod;
            for (d, &c) in polys[i].iter().enumerate() {
                next[d] -= coef * c;
            }
        }
        polys.push(next);
    }
    let mut c = polys.pop().unwrap();
    c.reverse();
    c
}

fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let n = coeffs.len() - 1;
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        c[(0, j)] = -coeffs[j + 1];
    }
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    c
}

/// Newton ratio f/f' for f(l) = det(H - l I), which equals -1 / tr((H - l I)^-1).
fn newton_ratio(h: &DMatrix<Complex64>, l: Complex64) -> Option<Complex64> {
    let n = h.nrows();
    let inv = (h - DMatrix::<Complex64>::identity(n, n) * l).lu().try_inverse()?;
    let tr: Complex64 = inv.diagonal().iter().sum();
    let r = -Complex64::new(1.0, 0.0) / tr;
    (r.re.is_finite() && r.im.is_finite()).then_some(r)
}

/// Aberth simultaneous refinement of all roots of det(H - l I), started from the
/// companion-matrix roots.
fn polish(h: &DMatrix<Complex64>, mut roots: Vec<Complex64>) -> Vec<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    for _ in 0..60 {
        let mut biggest: f64 = 0.0;
        for i in 0..roots.len() {
            let Some(ratio) = newton_ratio(h, roots[i]) else { continue };
            let repulsion: Complex64 = (0..roots.len())
                .filter(|&j| j != i)
                .map(|j| one / (roots[i] - roots[j]))
                .sum();
            let step = ratio / (one - ratio * repulsion);
            roots[i] -= step;
            biggest = biggest.max(step.norm());
        }
        if biggest <= 1e-15 {
            break;
        }
    }
    roots
}

fn hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let one = |x: &[Complex64], y: &[Complex64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let s = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * s)
}

#[test]
fn eigenvalues_match_companion_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = 2 + trial % 39;
        let a = random_matrix(&mut rng, n);
        let direct = eigenvalues(&a).unwrap();
        let h = a.clone().hessenberg().h();
        let comp = companion(&charpoly_hessenberg(&h));
        let hc = h.map(|v| Complex64::new(v, 0.0));
        let via_poly: Vec<Complex64> =
            polish(&hc, eigenvalues(&comp).unwrap());
        let d = hausdorff(&direct, &via_poly);
        worst = worst.max(d);
        assert!(d <= 1e-6, "trial {trial} n={n}: hausdorff {d:e}");
    }
    eprintln!("worst companion hausdorff distance {worst:e}");
}

#[test]
fn conjugate_closure() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2..30 {
        let a = random_matrix(&mut rng, n);
        let l = eigenvalues(&a).unwrap();
        for z in &l {
            assert!(l.iter().any(|w| *w == z.conj()), "{z} lacks an exact conjugate");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn residual_and_biorthonormality(seed in any::<u64>(), n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n);
        let l = eigenvalues(&a).unwrap();
        let (phi, psi) = eigenvectors(&a, &l).unwrap();
        let ac = a.map(|v| Complex64::new(v, 0.0));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(l.clone()));
        let anorm = a.norm();
        prop_assert!((&ac * &phi - &phi * d).norm() <= 1e-8 * anorm);
        let eye = DMatrix::<Complex64>::identity(n, n);
        prop_assert!((&psi * &phi - eye).norm() <= 1e-8 * n as f64);
        let raw = raw_participation(&phi, &psi);
        for col in raw.column_iter() {
            let s: Complex64 = col.iter().sum();
            prop_assert!((s - Complex64::new(1.0, 0.0)).norm() <= 1e-8);
        }
    }

    #[test]
    fn tracking_is_a_permutation(
        re in proptest::collection::vec(-5.0f64..0.0, 1..20),
        noise in proptest::collection::vec(-0.5f64..0.5, 20),
        shuffle_seed in any::<u64>(),
    ) {
        let reference: Vec<Complex64> = re.iter().enumerate()
            .map(|(i, &r)| Complex64::new(r, (i % 3) as f64)).collect();
        let mut current: Vec<Complex64> = reference.iter().zip(&noise)
            .map(|(z, &e)| z + Complex64::new(e, -e)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..current.len()).rev() {
            let j = rng.random_range(0..=i);
            current.swap(i, j);
        }
        let perm = track_poles(&reference, &current).unwrap();
        prop_assert!(is_permutation(&perm));
    }
}

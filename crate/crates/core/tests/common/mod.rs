//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use modalreg::cart::{self, FitParams, Splitter};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force regression tree on one feature: every midpoint between distinct
/// values is scored by directly summing squared deviations in both children.
#[derive(Debug)]
pub enum OracleTree {
    Leaf(Vec<f64>),
    Split { threshold: f64, left: Box<OracleTree>, right: Box<OracleTree> },
}

fn mean(rows: &[&Vec<f64>]) -> Vec<f64> {
    let m = rows[0].len();
    let first = rows[0];
    if rows.iter().all(|r| *r == first) {
        return first.clone();
    }
    (0..m).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
}

fn sse(rows: &[&Vec<f64>]) -> f64 {
    let mu = mean(rows);
    rows.iter()
        .map(|r| r.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

pub fn oracle_fit(xs: &[f64], ys: &[Vec<f64>], max_depth: Option<usize>) -> OracleTree {
    grow(xs, &ys.iter().collect::<Vec<_>>(), 0, max_depth)
}

fn grow(xs: &[f64], ys: &[&Vec<f64>], depth: usize, max_depth: Option<usize>) -> OracleTree {
    let pure = ys.iter().all(|r| *r == ys[0]);
    let mut distinct = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if pure || xs.len() < 2 || distinct.len() < 2 || max_depth.is_some_and(|d| depth >= d) {
        return OracleTree::Leaf(mean(ys));
    }
    let mut best: Option<(f64, f64)> = None;
    for w in distinct.windows(2) {
        let mut t = 0.5 * (w[0] + w[1]);
        if t <= w[0] {
            t = w[1];
        }
        let left: Vec<&Vec<f64>> = xs.iter().zip(ys).filter(|(x, _)| **x < t).map(|(_, y)| *y).collect();
        let right: Vec<&Vec<f64>> = xs.iter().zip(ys).filter(|(x, _)| **x >= t).map(|(_, y)| *y).collect();
        let cost = sse(&left) + sse(&right);
        if best.is_none_or(|(_, c)| cost < c - 1e-12 * c.abs()) {
            best = Some((t, cost));
        }
    }
    let (t, _) = best.expect("two distinct values give a candidate");
    let split = |keep_left: bool| {
        let (x, y): (Vec<f64>, Vec<&Vec<f64>>) =
            xs.iter().zip(ys).filter(|(x, _)| (**x < t) == keep_left).map(|(x, y)| (*x, *y)).unzip();
        Box::new(grow(&x, &y, depth + 1, max_depth))
    };
    OracleTree::Split {
        threshold: t,
        left: split(true),
        right: split(false),
    }
}

impl OracleTree {
    pub fn predict(&self, x: f64) -> &[f64] {
        match self {
            OracleTree::Leaf(v) => v,
            OracleTree::Split { threshold, left, right } => {
                if x < *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            OracleTree::Leaf(_) => 1,
            OracleTree::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

/// One random single-feature dataset of at most 12 samples: compares the library's
/// BEST tree against the oracle at every data value and every midpoint. Returns true
/// on agreement.
pub fn cart_oracle_trial(rng: &mut ChaCha8Rng) -> bool {
    let n = rng.random_range(1..=12);
    let m = if rng.random_bool(0.25) { rng.random_range(2..=3) } else { 1 };
    // small integer support so repeated feature values are common
    let support = rng.random_range(1..=10);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..support) as f64 * 0.5).collect();
    let ys: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let max_depth = match rng.random_range(0..4) {
        0 => None,
        d => Some(d),
    };
    let x = DMatrix::from_column_slice(n, 1, &xs);
    let y = DMatrix::from_fn(n, m, |i, k| ys[i][k]);
    let params = FitParams {
        max_depth,
        splitter: Splitter::Best,
        ..FitParams::default()
    };
    let tree = cart::fit(&x, &y, &params).expect("valid data");
    let oracle = oracle_fit(&xs, &ys, max_depth);
    if tree.n_leaves() != oracle.n_leaves() {
        return false;
    }
    let mut probes = xs.clone();
    probes.sort_by(f64::total_cmp);
    probes.dedup();
    let mids: Vec<f64> = probes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    probes.extend(mids);
    probes.extend([-1.0, 100.0]);
    probes.iter().all(|&p| {
        let a = tree.predict(&[p]).expect("predict");
        let b = oracle.predict(p);
        a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-9 * (1.0 + v.abs()))
    })
}

/// Number of disagreeing trials out of `trials`.
pub fn cart_oracle_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).filter(|_| !cart_oracle_trial(&mut rng)).count()
}

/// Training MSE of a tree on its own data.
pub fn training_mse(tree: &cart::Tree, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let p = tree.predict_many(x).expect("predict");
    (&p - y).iter().map(|d| d * d).sum::<f64>() / y.len() as f64
}

/// Random regression data with distinct feature rows.
pub fn random_data(rng: &mut ChaCha8Rng, n: usize, nf: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let x = DMatrix::from_fn(n, nf, |_, _| rng.random_range(0.0..1.0));
    let y = DMatrix::from_fn(n, m, |i, k| {
        let s: f64 = (0..nf).map(|f| x[(i, f)] * (f + k + 1) as f64).sum();
        s.sin() + 0.3 * rng.random_range(-1.0..1.0)
    });
    (x, y)
}

/// Pruning over an increasing alpha sequence on one random tree: leaf count must not
/// increase and training MSE must not decrease. Returns true when both hold.
pub fn pruning_trial(rng: &mut ChaCha8Rng) -> bool {
    let n = rng.random_range(10..120);
    let nf = rng.random_range(1..4);
    let m = rng.random_range(1..3);
    let (x, y) = random_data(rng, n, nf, m);
    let tree = cart::fit(&x, &y, &FitParams::default()).expect("fit");
    let root = tree.core.nodes[0].impurity;
    let mut alphas: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.2) * root).collect();
    alphas.push(0.0);
    alphas.sort_by(f64::total_cmp);
    let mut last_leaves = usize::MAX;
    let mut last_mse = f64::NEG_INFINITY;
    for a in alphas {
        let p = tree.prune(a).expect("prune");
        let mse = training_mse(&p, &x, &y);
        if p.n_leaves() > last_leaves || mse < last_mse - 1e-12 * (1.0 + last_mse.abs()) {
            return false;
        }
        last_leaves = p.n_leaves();
        last_mse = mse;
    }
    true
}

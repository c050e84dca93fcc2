//! Bagged ensembles of fully grown multi-output trees.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{self, from_json_deep, CoreRepr, FitParams, Splitter, TreeCore, ValueMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub seed: u64,
    /// Member parameters; `seed` is replaced per member.
    pub tree: FitParams,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            n_trees: 50,
            bootstrap: true,
            seed: 0,
            tree: FitParams {
                splitter: Splitter::BestRandom,
                ..FitParams::default()
            },
        }
    }
}

/// Member trees share one value table. Its first `n_train` rows are the training
/// targets, so a pure leaf simply points at one of its training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "EnsembleRepr", try_from = "EnsembleRepr")]
pub struct BaggedEnsemble {
    pub params: EnsembleParams,
    pub seeds: Vec<u64>,
    pub trees: Vec<TreeCore>,
    pub n_features: usize,
    pub n_outputs: usize,
    pub n_train: usize,
    /// Row-major, `n_outputs` per row.
    pub table: Vec<f64>,
}

/// Per-member seeds drawn from the master seed.
pub fn member_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random()).collect()
}

/// Bootstrap rows for one member: `n` draws with replacement from a stream separate
/// from the one used for split thresholds.
pub fn bootstrap_rows(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn fit_bagging(x: &DMatrix<f64>, y: &DMatrix<f64>, params: &EnsembleParams) -> Result<BaggedEnsemble> {
    if params.n_trees == 0 {
        return Err(Error::InvalidArgument("an ensemble needs at least one tree".into()));
    }
    params.tree.validate()?;
    cart::validate_xy(x, y)?;
    let n = x.nrows();
    let m = y.ncols();
    let yr = cart::row_major(y);
    let seeds = member_seeds(params.seed, params.n_trees);
    let grown: Vec<cart::Grown> = seeds
        .par_iter()
        .map(|&seed| {
            let samples = if params.bootstrap {
                bootstrap_rows(seed, n)
            } else {
                (0..n).collect()
            };
            let p = FitParams {
                seed,
                ..params.tree.clone()
            };
            cart::fit_rows(x, &yr, m, samples, &p, ValueMode::SharedRows { n_rows: n })
        })
        .collect();

    let mut table = yr;
    let mut trees = Vec::with_capacity(grown.len());
    for g in grown {
        let offset = (table.len() / m) as u32;
        let mut core = g.core;
        for node in core.nodes.iter_mut().filter(|n| n.is_leaf()) {
            if node.value as usize >= n {
                node.value = node.value - n as u32 + offset;
            }
        }
        table.extend_from_slice(&g.local_values);
        trees.push(core);
    }
    Ok(BaggedEnsemble {
        params: params.clone(),
        seeds,
        trees,
        n_features: x.ncols(),
        n_outputs: m,
        n_train: n,
        table,
    })
}

impl BaggedEnsemble {
    fn row(&self, v: u32) -> &[f64] {
        let m = self.n_outputs;
        let v = v as usize;
        &self.table[v * m..(v + 1) * m]
    }

    pub fn member_prediction(&self, tree: usize, x: &[f64]) -> &[f64] {
        let core = &self.trees[tree];
        self.row(core.nodes[core.leaf_of(x)].value)
    }

    /// Mean of the member predictions.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
                context: "feature vector length",
            });
        }
        let mut out = vec![0.0; self.n_outputs];
        for t in 0..self.trees.len() {
            for (o, v) in out.iter_mut().zip(self.member_prediction(t, x)) {
                *o += v;
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Ok(out)
    }

    pub fn predict_many(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.n_outputs);
        let mut row = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(i, j)]);
            for (k, v) in self.predict(&row)?.into_iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        Ok(out)
    }

    /// Mean of the member importances.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for t in &self.trees {
            for (a, b) in imp.iter_mut().zip(t.feature_importance()) {
                *a += b;
            }
        }
        let k = self.trees.len() as f64;
        imp.iter_mut().for_each(|v| *v /= k);
        imp
    }

    /// Training feature ranges (identical across members up to bootstrap sampling, so
    /// the union is reported).
    pub fn feature_ranges(&self) -> Vec<(f64, f64)> {
        let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_features];
        for t in &self.trees {
            for (acc, &(lo, hi)) in r.iter_mut().zip(&t.feature_ranges) {
                acc.0 = acc.0.min(lo);
                acc.1 = acc.1.max(hi);
            }
        }
        r
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleRepr {
    params: EnsembleParams,
    seeds: Vec<u64>,
    n_features: usize,
    n_outputs: usize,
    n_train: usize,
    table: Vec<Vec<f64>>,
    trees: Vec<CoreRepr>,
}

impl From<BaggedEnsemble> for EnsembleRepr {
    fn from(e: BaggedEnsemble) -> Self {
        EnsembleRepr {
            table: e.table.chunks(e.n_outputs).map(<[f64]>::to_vec).collect(),
            trees: e.trees.iter().map(CoreRepr::from_core).collect(),
            params: e.params,
            seeds: e.seeds,
            n_features: e.n_features,
            n_outputs: e.n_outputs,
            n_train: e.n_train,
        }
    }
}

impl TryFrom<EnsembleRepr> for BaggedEnsemble {
    type Error = Error;

    fn try_from(repr: EnsembleRepr) -> Result<Self> {
        let rows = repr.table.len();
        if let Some(bad) = repr.table.iter().find(|r| r.len() != repr.n_outputs) {
            return Err(Error::DimensionMismatch {
                expected: repr.n_outputs,
                got: bad.len(),
                context: "ensemble value table rows",
            });
        }
        if repr.trees.is_empty() || repr.seeds.len() != repr.trees.len() {
            return Err(Error::InvalidArgument("ensemble seeds and members disagree".into()));
        }
        let trees = repr
            .trees
            .into_iter()
            .map(|t| t.into_core(rows))
            .collect::<Result<Vec<_>>>()?;
        if trees.iter().any(|t| t.n_features != repr.n_features || t.n_outputs != repr.n_outputs) {
            return Err(Error::InvalidArgument("member shape differs from ensemble shape".into()));
        }
        Ok(BaggedEnsemble {
            params: repr.params,
            seeds: repr.seeds,
            trees,
            n_features: repr.n_features,
            n_outputs: repr.n_outputs,
            n_train: repr.n_train,
            table: repr.table.concat(),
        })
    }
}

impl BaggedEnsemble {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_json_deep(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cart::fit;

    fn data() -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(60, 2, |i, j| ((i * 7 + j * 11) % 23) as f64 + 0.01 * i as f64);
        let y = DMatrix::from_fn(60, 3, |i, k| ((i as f64) * 0.3 + k as f64).sin());
        (x, y)
    }

    #[test]
    fn single_member_without_bootstrap_is_a_tree() {
        let (x, y) = data();
        let params = EnsembleParams {
            n_trees: 1,
            bootstrap: false,
            seed: 9,
            ..EnsembleParams::default()
        };
        let e = fit_bagging(&x, &y, &params).unwrap();
        let t = fit(
            &x,
            &y,
            &FitParams {
                seed: e.seeds[0],
                ..params.tree.clone()
            },
        )
        .unwrap();
        let probe = DMatrix::from_fn(40, 2, |i, j| (i as f64 * 0.57 + j as f64 * 3.1) % 23.0);
        assert_eq!(e.predict_many(&probe).unwrap(), t.predict_many(&probe).unwrap());
        assert_eq!(e.trees[0].nodes.len(), t.core.nodes.len());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (x, y) = data();
        let p = EnsembleParams {
            n_trees: 8,
            seed: 3,
            ..EnsembleParams::default()
        };
        let a = fit_bagging(&x, &y, &p).unwrap();
        let b = fit_bagging(&x, &y, &p).unwrap();
        assert_eq!(a, b);
        let c = fit_bagging(&x, &y, &EnsembleParams { seed: 4, ..p }).unwrap();
        assert_ne!(a.predict(&[5.5, 2.5]).unwrap(), c.predict(&[5.5, 2.5]).unwrap());
    }

    #[test]
    fn mean_of_members() {
        let (x, y) = data();
        let e = fit_bagging(&x, &y, &EnsembleParams { n_trees: 5, ..EnsembleParams::default() }).unwrap();
        let q = [4.2, 17.9];
        let p = e.predict(&q).unwrap();
        for k in 0..3 {
            let members: Vec<f64> = (0..5).map(|t| e.member_prediction(t, &q)[k]).collect();
            let mean = members.iter().sum::<f64>() / 5.0;
            assert!((p[k] - mean).abs() < 1e-15);
        }
        assert!(e.predict(&[1.0]).is_err());
        assert!(fit_bagging(&x, &y, &EnsembleParams { n_trees: 0, ..EnsembleParams::default() }).is_err());
    }

    #[test]
    fn memorizes_without_bootstrap() {
        let (x, y) = data();
        let e = fit_bagging(&x, &y, &EnsembleParams { n_trees: 4, bootstrap: false, ..EnsembleParams::default() }).unwrap();
        assert_eq!(e.predict_many(&x).unwrap(), y);
        // every leaf is pure, so nothing was appended to the table
        assert_eq!(e.table.len(), 60 * 3);
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = data();
        let e = fit_bagging(&x, &y, &EnsembleParams { n_trees: 3, ..EnsembleParams::default() }).unwrap();
        let back = BaggedEnsemble::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
    }
}

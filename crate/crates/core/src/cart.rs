//! CART regression trees: single and multi-output targets, exhaustive or randomized
//! splits, cost-complexity pruning, grid-search validation, importances and
//! feature-space partitions.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::split_indices;
use crate::error::{Error, Result};

/// Marker for "no child" / "no stored value".
pub const NONE: u32 = u32::MAX;

const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitter {
    /// Exhaustive search over midpoints of consecutive distinct values.
    Best,
    /// One uniformly drawn threshold per feature; the best feature wins.
    BestRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Mse,
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    /// `None` grows without a depth limit.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    pub splitter: Splitter,
    pub criterion: Criterion,
    pub ccp_alpha: f64,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
            splitter: Splitter::Best,
            criterion: Criterion::Mse,
            ccp_alpha: 0.0,
            seed: 0,
        }
    }
}

impl FitParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_samples_split < 2 {
            return Err(Error::InvalidArgument("min_samples_split must be at least 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidArgument("min_samples_leaf must be at least 1".into()));
        }
        if !(self.ccp_alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("ccp_alpha {} must be >= 0", self.ccp_alpha)));
        }
        Ok(())
    }
}

/// Flat tree node. Leaves have `feature == NONE`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub n_samples: u32,
    /// Node impurity (sum of per-output variances for MSE).
    pub impurity: f64,
    /// Row of the value table holding this node's mean, or `NONE`.
    pub value: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature == NONE
    }
}

/// Tree structure without its value table. Node 0 is the root; children always have
/// larger indices than their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeCore {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub n_outputs: usize,
    pub feature_ranges: Vec<(f64, f64)>,
}

impl TreeCore {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return i;
            }
            i = if x[n.feature as usize] < n.threshold { n.left } else { n.right } as usize;
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.is_leaf() {
                depth[n.left as usize] = depth[i] + 1;
                depth[n.right as usize] = depth[i] + 1;
                max = max.max(depth[i] + 1);
            }
        }
        max
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
                context: "feature vector length",
            });
        }
        Ok(())
    }

    /// Impurity-decrease importances normalized to sum 1 (all zero for a single leaf).
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        let total = self.nodes[0].n_samples as f64;
        for n in &self.nodes {
            if n.is_leaf() {
                continue;
            }
            let l = &self.nodes[n.left as usize];
            let r = &self.nodes[n.right as usize];
            let dec = n.n_samples as f64 * n.impurity
                - l.n_samples as f64 * l.impurity
                - r.n_samples as f64 * r.impurity;
            imp[n.feature as usize] += dec.max(0.0) / total;
        }
        let s: f64 = imp.iter().sum();
        if s > 0.0 {
            imp.iter_mut().for_each(|v| *v /= s);
        }
        imp
    }

    /// Thresholds used on `feature`, ascending and deduplicated.
    pub fn thresholds(&self, feature: usize) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .nodes
            .iter()
            .filter(|n| !n.is_leaf() && n.feature as usize == feature)
            .map(|n| n.threshold)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// A fitted standalone tree: every node stores its mean, so it can be pruned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TreeRepr", try_from = "TreeRepr")]
pub struct Tree {
    pub core: TreeCore,
    /// Row-major value table, `n_outputs` per row.
    pub values: Vec<f64>,
    pub params: FitParams,
}

impl Tree {
    pub fn n_leaves(&self) -> usize {
        self.core.n_leaves()
    }

    pub fn value_row(&self, node: usize) -> &[f64] {
        let m = self.core.n_outputs;
        let v = self.core.nodes[node].value as usize;
        &self.values[v * m..(v + 1) * m]
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.core.check_row(x)?;
        Ok(self.value_row(self.core.leaf_of(x)).to_vec())
    }

    pub fn predict_many(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.core.n_outputs;
        let mut out = DMatrix::zeros(x.nrows(), m);
        let mut row = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(i, j)]);
            let p = self.predict(&row)?;
            for (k, v) in p.into_iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        Ok(out)
    }

    pub fn feature_importance(&self) -> Vec<f64> {
        self.core.feature_importance()
    }

    /// Minimal cost-complexity pruning: repeatedly collapses the weakest link while its
    /// effective alpha `(R(t) - R(T_t)) / (|leaves(T_t)| - 1)` is at most `alpha`, where
    /// `R(t)` is the node impurity weighted by its sample fraction.
    pub fn prune(&self, alpha: f64) -> Result<Tree> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("pruning alpha {alpha} must be >= 0")));
        }
        if alpha == 0.0 {
            return Ok(self.clone());
        }
        let nodes = &self.core.nodes;
        let total = nodes[0].n_samples as f64;
        let risk: Vec<f64> = nodes.iter().map(|n| n.n_samples as f64 / total * n.impurity).collect();
        let mut collapsed = vec![false; nodes.len()];
        let mut sub_risk = vec![0.0; nodes.len()];
        let mut leaves = vec![0usize; nodes.len()];
        let mut reach = vec![false; nodes.len()];
        loop {
            for i in (0..nodes.len()).rev() {
                let n = &nodes[i];
                if n.is_leaf() || collapsed[i] {
                    sub_risk[i] = risk[i];
                    leaves[i] = 1;
                } else {
                    let (l, r) = (n.left as usize, n.right as usize);
                    sub_risk[i] = sub_risk[l] + sub_risk[r];
                    leaves[i] = leaves[l] + leaves[r];
                }
            }
            reach.iter_mut().for_each(|v| *v = false);
            reach[0] = true;
            let mut weakest: Option<(f64, usize)> = None;
            for i in 0..nodes.len() {
                let n = &nodes[i];
                if !reach[i] || n.is_leaf() || collapsed[i] {
                    continue;
                }
                reach[n.left as usize] = true;
                reach[n.right as usize] = true;
                let g = ((risk[i] - sub_risk[i]) / (leaves[i] - 1) as f64).max(0.0);
                if weakest.is_none_or(|(best, _)| g < best) {
                    weakest = Some((g, i));
                }
            }
            match weakest {
                Some((g, i)) if g <= alpha => collapsed[i] = true,
                _ => break,
            }
        }
        Ok(self.compact(&collapsed))
    }

    /// Copies the reachable part of the tree, turning collapsed nodes into leaves.
    /// Children are allocated as adjacent pairs, the same layout `grow` produces.
    fn compact(&self, collapsed: &[bool]) -> Tree {
        let m = self.core.n_outputs;
        let mut nodes: Vec<Node> = vec![self.core.nodes[0]];
        let mut values = vec![0.0; 0];
        let mut value_of = Vec::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((old, new)) = stack.pop() {
            let src = self.core.nodes[old];
            let mut node = src;
            if src.is_leaf() || collapsed[old] {
                node.feature = NONE;
                node.threshold = 0.0;
                node.left = NONE;
                node.right = NONE;
            } else {
                let l = nodes.len();
                node.left = l as u32;
                node.right = l as u32 + 1;
                nodes.push(src);
                nodes.push(src);
                stack.push((src.right as usize, l + 1));
                stack.push((src.left as usize, l));
            }
            nodes[new] = node;
            value_of.push((new, src.value as usize));
        }
        value_of.sort_unstable();
        for (new, old_v) in value_of {
            nodes[new].value = (values.len() / m) as u32;
            values.extend_from_slice(&self.values[old_v * m..(old_v + 1) * m]);
        }
        Tree {
            core: TreeCore {
                nodes,
                ..self.core.clone()
            },
            values,
            params: self.params.clone(),
        }
    }
}

/// How node values are stored while growing.
#[derive(Clone, Copy, Debug)]
pub(crate) enum ValueMode {
    /// Every node gets its own mean row in the local table.
    AllNodes,
    /// Pure leaves point at a training row (`< n_rows`); impure leaves get a local row
    /// addressed as `n_rows + local`; internal nodes store nothing.
    SharedRows { n_rows: usize },
}

pub(crate) struct Grown {
    pub core: TreeCore,
    pub local_values: Vec<f64>,
}

fn check_xy(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::EmptyInput("training data"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.nrows(),
            context: "x and y row counts",
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data"));
    }
    if x.nrows() >= NONE as usize {
        return Err(Error::InvalidArgument("too many training rows".into()));
    }
    Ok(())
}

pub(crate) fn row_major(y: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for i in 0..y.nrows() {
        out.extend(y.row(i).iter());
    }
    out
}

/// Fits a tree on all rows; prunes afterwards when `params.ccp_alpha > 0`.
pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, params: &FitParams) -> Result<Tree> {
    params.validate()?;
    check_xy(x, y)?;
    let yr = row_major(y);
    let samples: Vec<usize> = (0..x.nrows()).collect();
    let grown = grow(x, &yr, y.ncols(), samples, params, ValueMode::AllNodes);
    let tree = Tree {
        core: grown.core,
        values: grown.local_values,
        params: params.clone(),
    };
    if params.ccp_alpha > 0.0 {
        tree.prune(params.ccp_alpha)
    } else {
        Ok(tree)
    }
}

pub(crate) fn fit_rows(
    x: &DMatrix<f64>,
    y_rows: &[f64],
    n_outputs: usize,
    samples: Vec<usize>,
    params: &FitParams,
    mode: ValueMode,
) -> Grown {
    grow(x, y_rows, n_outputs, samples, params, mode)
}

pub(crate) fn validate_xy(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    check_xy(x, y)
}

struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Keeps the first candidate unless a later one is better beyond the relative tie
/// tolerance. Candidates arrive by feature, then threshold, ascending.
fn offer(best: &mut Option<Candidate>, c: Candidate, maximize: bool) {
    let better = match best {
        None => true,
        Some(b) => {
            let tol = TIE_TOL * b.score.abs().max(c.score.abs()).max(f64::MIN_POSITIVE);
            if maximize {
                c.score > b.score + tol
            } else {
                c.score < b.score - tol
            }
        }
    };
    if better {
        *best = Some(c);
    }
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    m: usize,
    params: &'a FitParams,
    rng: ChaCha8Rng,
    mode: ValueMode,
    // scratch
    centered: Vec<f64>,
    sums: Vec<f64>,
    order: Vec<(f64, usize)>,
}

fn grow(
    x: &DMatrix<f64>,
    y: &[f64],
    m: usize,
    mut samples: Vec<usize>,
    params: &FitParams,
    mode: ValueMode,
) -> Grown {
    let nf = x.ncols();
    let feature_ranges = (0..nf)
        .map(|f| {
            let col = x.column(f);
            samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(col[r]), hi.max(col[r])))
        })
        .collect();
    let mut g = Grower {
        x,
        y,
        m,
        params,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        mode,
        centered: Vec::new(),
        sums: vec![0.0; m],
        order: Vec::new(),
    };
    let mut nodes: Vec<Node> = Vec::new();
    let mut local = Vec::new();
    let mut scratch = Vec::with_capacity(samples.len());
    let blank = Node {
        feature: NONE,
        threshold: 0.0,
        left: NONE,
        right: NONE,
        n_samples: 0,
        impurity: 0.0,
        value: NONE,
    };
    nodes.push(blank);
    let mut stack = vec![(0usize, 0usize, samples.len(), 0usize)];
    let mut mean = vec![0.0; m];
    while let Some((id, start, end, depth)) = stack.pop() {
        let seg = &samples[start..end];
        let n = seg.len();
        mean.iter_mut().for_each(|v| *v = 0.0);
        for &r in seg {
            for (k, v) in mean.iter_mut().enumerate() {
                *v += y[r * m + k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let first = &y[seg[0] * m..seg[0] * m + m];
        let pure = seg.iter().all(|&r| y[r * m..r * m + m] == *first);
        if pure {
            // exact copy: averaging repeated rows can round
            mean.copy_from_slice(first);
        }
        let impurity = if pure { 0.0 } else { g.impurity(seg, &mean) };

        let node = &mut nodes[id];
        node.n_samples = n as u32;
        node.impurity = impurity;

        let p = g.params;
        let stop = pure
            || n < p.min_samples_split
            || n < 2 * p.min_samples_leaf
            || p.max_depth.is_some_and(|d| depth >= d);
        let split = if stop { None } else { g.find_split(seg, &mean) };
        let leaf = split.is_none();

        node.value = match g.mode {
            ValueMode::AllNodes => push_row(&mut local, &mean, m),
            ValueMode::SharedRows { .. } if !leaf => NONE,
            ValueMode::SharedRows { .. } if pure => seg[0] as u32,
            ValueMode::SharedRows { n_rows } => n_rows as u32 + push_row(&mut local, &mean, m),
        };

        if let Some((f, t)) = split {
            // stable partition of the segment: x < t goes left
            scratch.clear();
            let col = g.x.column(f);
            let seg = &mut samples[start..end];
            let mut nl = 0;
            for i in 0..seg.len() {
                let r = seg[i];
                if col[r] < t {
                    seg[nl] = r;
                    nl += 1;
                } else {
                    scratch.push(r);
                }
            }
            seg[nl..].copy_from_slice(&scratch);
            let (l, r) = (nodes.len(), nodes.len() + 1);
            let node = &mut nodes[id];
            node.feature = f as u32;
            node.threshold = t;
            node.left = l as u32;
            node.right = r as u32;
            nodes.push(blank);
            nodes.push(blank);
            stack.push((r, start + nl, end, depth + 1));
            stack.push((l, start, start + nl, depth + 1));
        }
    }
    Grown {
        core: TreeCore {
            nodes,
            n_features: nf,
            n_outputs: m,
            feature_ranges,
        },
        local_values: local,
    }
}

fn push_row(table: &mut Vec<f64>, row: &[f64], m: usize) -> u32 {
    let idx = table.len() / m;
    table.extend_from_slice(row);
    idx as u32
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sum over outputs of the mean absolute deviation from the median.
fn mae_impurity(y: &[f64], m: usize, rows: &[usize]) -> f64 {
    let mut buf = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for k in 0..m {
        buf.clear();
        buf.extend(rows.iter().map(|&r| y[r * m + k]));
        let med = median(&mut buf);
        total += buf.iter().map(|v| (v - med).abs()).sum::<f64>() / rows.len() as f64;
    }
    total
}

impl Grower<'_> {
    fn impurity(&mut self, seg: &[usize], mean: &[f64]) -> f64 {
        match self.params.criterion {
            Criterion::Mse => {
                let m = self.m;
                let mut sse = 0.0;
                for &r in seg {
                    for k in 0..m {
                        let d = self.y[r * m + k] - mean[k];
                        sse += d * d;
                    }
                }
                sse / seg.len() as f64
            }
            Criterion::Mae => mae_impurity(self.y, self.m, seg),
        }
    }

    fn find_split(&mut self, seg: &[usize], mean: &[f64]) -> Option<(usize, f64)> {
        match self.params.criterion {
            Criterion::Mse => self.split_mse(seg, mean),
            Criterion::Mae => self.split_mae(seg),
        }
    }

    /// MSE split search on centred targets. Children SSE equals
    /// `Q - |S_L|^2 * n / (n_L n_R)` with `S_L` the left sum of centred rows, so the best
    /// split maximizes `|S_L|^2 * n / (n_L n_R)`.
    fn split_mse(&mut self, seg: &[usize], mean: &[f64]) -> Option<(usize, f64)> {
        let m = self.m;
        let n = seg.len();
        let min_leaf = self.params.min_samples_leaf;
        self.centered.clear();
        for &r in seg {
            for k in 0..m {
                self.centered.push(self.y[r * m + k] - mean[k]);
            }
        }
        let mut best: Option<Candidate> = None;
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            match self.params.splitter {
                Splitter::Best => {
                    self.order.clear();
                    self.order.extend(seg.iter().enumerate().map(|(i, &r)| (col[r], i)));
                    self.order.sort_by(|a, b| a.0.total_cmp(&b.0));
                    if self.order[0].0 == self.order[n - 1].0 {
                        continue;
                    }
                    self.sums.iter_mut().for_each(|v| *v = 0.0);
                    for i in 1..n {
                        let (xv, pos) = self.order[i - 1];
                        let row = &self.centered[pos * m..pos * m + m];
                        self.sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        let xn = self.order[i].0;
                        if xv == xn || i < min_leaf || n - i < min_leaf {
                            continue;
                        }
                        let s2: f64 = self.sums.iter().map(|v| v * v).sum();
                        let score = s2 * n as f64 / (i as f64 * (n - i) as f64);
                        let mut t = 0.5 * (xv + xn);
                        if t <= xv || !t.is_finite() {
                            t = xn;
                        }
                        offer(&mut best, Candidate { feature: f, threshold: t, score }, true);
                    }
                }
                Splitter::BestRandom => {
                    let (lo, hi) = seg
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(col[r]), hi.max(col[r])));
                    if lo == hi {
                        continue;
                    }
                    let u: f64 = self.rng.random();
                    let mut t = lo + (1.0 - u) * (hi - lo);
                    if t <= lo {
                        t = hi;
                    }
                    self.sums.iter_mut().for_each(|v| *v = 0.0);
                    let mut nl = 0;
                    for (i, &r) in seg.iter().enumerate() {
                        if col[r] < t {
                            nl += 1;
                            let row = &self.centered[i * m..i * m + m];
                            self.sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    }
                    if nl < min_leaf || n - nl < min_leaf {
                        continue;
                    }
                    let s2: f64 = self.sums.iter().map(|v| v * v).sum();
                    let score = s2 * n as f64 / (nl as f64 * (n - nl) as f64);
                    offer(&mut best, Candidate { feature: f, threshold: t, score }, true);
                }
            }
        }
        best.map(|c| (c.feature, c.threshold))
    }

    /// Direct evaluation of the weighted child MAE for each candidate.
    fn split_mae(&mut self, seg: &[usize]) -> Option<(usize, f64)> {
        let n = seg.len();
        let min_leaf = self.params.min_samples_leaf;
        let mut best: Option<Candidate> = None;
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            let mut thresholds = Vec::new();
            match self.params.splitter {
                Splitter::Best => {
                    let mut vals: Vec<f64> = seg.iter().map(|&r| col[r]).collect();
                    vals.sort_by(f64::total_cmp);
                    vals.dedup();
                    for w in vals.windows(2) {
                        let mut t = 0.5 * (w[0] + w[1]);
                        if t <= w[0] {
                            t = w[1];
                        }
                        thresholds.push(t);
                    }
                }
                Splitter::BestRandom => {
                    let (lo, hi) = seg
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(col[r]), hi.max(col[r])));
                    if lo < hi {
                        let u: f64 = self.rng.random();
                        let t = lo + (1.0 - u) * (hi - lo);
                        thresholds.push(if t <= lo { hi } else { t });
                    }
                }
            }
            for t in thresholds {
                left.clear();
                right.clear();
                for &r in seg {
                    if col[r] < t {
                        left.push(r);
                    } else {
                        right.push(r);
                    }
                }
                if left.len() < min_leaf || right.len() < min_leaf {
                    continue;
                }
                let score = (left.len() as f64 * mae_impurity(self.y, self.m, &left)
                    + right.len() as f64 * mae_impurity(self.y, self.m, &right))
                    / n as f64;
                offer(&mut best, Candidate { feature: f, threshold: t, score }, false);
            }
        }
        best.map(|c| (c.feature, c.threshold))
    }
}

/// Hyperparameter grid. `ccp_alpha_rel` values are multiplied by the root impurity of
/// the training target, so one grid serves targets of any scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_leaf: Vec<usize>,
    pub min_samples_split: Vec<usize>,
    pub ccp_alpha_rel: Vec<f64>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid {
            max_depth: vec![None, Some(6), Some(10)],
            min_samples_leaf: vec![1, 3],
            min_samples_split: vec![2, 6],
            ccp_alpha_rel: vec![0.0, 1e-5],
        }
    }
}

impl ParamGrid {
    pub fn single(params: &FitParams) -> Self {
        ParamGrid {
            max_depth: vec![params.max_depth],
            min_samples_leaf: vec![params.min_samples_leaf],
            min_samples_split: vec![params.min_samples_split],
            ccp_alpha_rel: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.max_depth.len() * self.min_samples_leaf.len() * self.min_samples_split.len() * self.ccp_alpha_rel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub train_fraction: f64,
    /// `Some(k)` switches from a single split to k-fold validation.
    pub folds: Option<usize>,
    pub seed: u64,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            train_fraction: 0.8,
            folds: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub params: FitParams,
    pub validation_mse: f64,
}

fn mse_on(tree: &Tree, x: &DMatrix<f64>, y: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let m = y.ncols();
    let mut row = vec![0.0; x.ncols()];
    let mut total = 0.0;
    for &i in rows {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(i, j)]);
        let leaf = tree.core.leaf_of(&row);
        let p = tree.value_row(leaf);
        for k in 0..m {
            let d = p[k] - y[(i, k)];
            total += d * d;
        }
    }
    total / (rows.len() * m) as f64
}

fn root_impurity(y: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let m = y.ncols();
    let n = rows.len() as f64;
    (0..m)
        .map(|k| {
            let mean = rows.iter().map(|&i| y[(i, k)]).sum::<f64>() / n;
            rows.iter().map(|&i| (y[(i, k)] - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

/// Scores every grid cell on held-out data and returns the best parameters (absolute
/// alpha, first cell on ties) plus the full score table in grid order.
pub fn grid_search_cv(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    base: &FitParams,
    grid: &ParamGrid,
    cv: &CvSettings,
) -> Result<(FitParams, Vec<ScoreRow>)> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("hyperparameter grid"));
    }
    check_xy(x, y)?;
    let n = x.nrows();
    let folds: Vec<(Vec<usize>, Vec<usize>)> = match cv.folds {
        None => vec![split_indices(n, cv.train_fraction, cv.seed)?],
        Some(k) => {
            if k < 2 || k > n {
                return Err(Error::InvalidArgument(format!("{k}-fold validation on {n} rows")));
            }
            let (mut idx, mut rest) = split_indices(n, 0.5, cv.seed)?;
            idx.append(&mut rest);
            (0..k)
                .map(|f| {
                    let val: Vec<usize> = idx.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, &r)| r).collect();
                    let train: Vec<usize> = idx.iter().enumerate().filter(|(i, _)| i % k != f).map(|(_, &r)| r).collect();
                    (train, val)
                })
                .collect()
        }
    };
    let yr = row_major(y);
    let alpha_scale = root_impurity(y, &(0..n).collect::<Vec<_>>());
    let mut rows = Vec::with_capacity(grid.len());
    for &max_depth in &grid.max_depth {
        for &min_samples_leaf in &grid.min_samples_leaf {
            for &min_samples_split in &grid.min_samples_split {
                let params = FitParams {
                    max_depth,
                    min_samples_leaf,
                    min_samples_split,
                    ccp_alpha: 0.0,
                    ..base.clone()
                };
                params.validate()?;
                let mut scores = vec![0.0; grid.ccp_alpha_rel.len()];
                for (train, val) in &folds {
                    let grown = grow(x, &yr, y.ncols(), train.clone(), &params, ValueMode::AllNodes);
                    let tree = Tree {
                        core: grown.core,
                        values: grown.local_values,
                        params: params.clone(),
                    };
                    for (a, &rel) in grid.ccp_alpha_rel.iter().enumerate() {
                        let pruned = tree.prune(rel * alpha_scale)?;
                        scores[a] += mse_on(&pruned, x, y, val) / folds.len() as f64;
                    }
                }
                for (a, &rel) in grid.ccp_alpha_rel.iter().enumerate() {
                    rows.push(ScoreRow {
                        params: FitParams {
                            ccp_alpha: rel * alpha_scale,
                            ..params.clone()
                        },
                        validation_mse: scores[a],
                    });
                }
            }
        }
    }
    let best = rows
        .iter()
        .fold(None::<&ScoreRow>, |best, r| match best {
            Some(b) if b.validation_mse <= r.validation_mse => Some(b),
            _ => Some(r),
        })
        .expect("grid is non-empty");
    Ok((best.params.clone(), rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Min,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub value: f64,
}

fn combine(agg: Aggregation, a: f64, wa: f64, b: f64, wb: f64) -> f64 {
    match agg {
        Aggregation::Max => a.max(b),
        Aggregation::Min => a.min(b),
        Aggregation::Mean => {
            if wa + wb > 0.0 {
                (a * wa + b * wb) / (wa + wb)
            } else {
                0.5 * (a + b)
            }
        }
    }
}

/// Common refinement of two tilings of the same rectangle.
fn refine(a: &[Region], b: &[Region], f: impl Fn(f64, f64) -> f64) -> Vec<Region> {
    let mut xs: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.rect.x0, r.rect.x1]).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.rect.y0, r.rect.y1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let lookup = |regions: &[Region], x: f64, y: f64| {
        regions
            .iter()
            .find(|r| r.rect.contains(x, y))
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let mut out = Vec::with_capacity((xs.len() - 1) * (ys.len() - 1));
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let (cx, cy) = (0.5 * (wx[0] + wx[1]), 0.5 * (wy[0] + wy[1]));
            out.push(Region {
                rect: Rect {
                    x0: wx[0],
                    x1: wx[1],
                    y0: wy[0],
                    y1: wy[1],
                },
                value: f(lookup(a, cx, cy), lookup(b, cx, cy)),
            });
        }
    }
    out
}

/// Projects the tree onto the (`fi`, `fj`) plane over the training feature ranges.
/// Regions produced by splits on other features are merged with `agg` applied to output
/// component `output`. The returned rectangles tile the domain.
pub fn feature_space_partition(
    tree: &Tree,
    fi: usize,
    fj: usize,
    agg: Aggregation,
    output: usize,
) -> Result<Vec<Region>> {
    let core = &tree.core;
    if fi == fj {
        return Err(Error::InvalidArgument("partition needs two distinct features".into()));
    }
    for f in [fi, fj] {
        if f >= core.n_features {
            return Err(Error::IndexOutOfRange {
                index: f,
                limit: core.n_features,
            });
        }
    }
    if output >= core.n_outputs {
        return Err(Error::IndexOutOfRange {
            index: output,
            limit: core.n_outputs,
        });
    }
    let bounds: Vec<(f64, f64)> = core.feature_ranges.clone();
    Ok(partition_node(tree, 0, bounds, fi, fj, agg, output))
}

fn partition_node(
    tree: &Tree,
    id: usize,
    bounds: Vec<(f64, f64)>,
    fi: usize,
    fj: usize,
    agg: Aggregation,
    output: usize,
) -> Vec<Region> {
    let node = &tree.core.nodes[id];
    if node.is_leaf() {
        return vec![Region {
            rect: Rect {
                x0: bounds[fi].0,
                x1: bounds[fi].1,
                y0: bounds[fj].0,
                y1: bounds[fj].1,
            },
            value: tree.value_row(id)[output],
        }];
    }
    let f = node.feature as usize;
    let t = node.threshold;
    let (lo, hi) = bounds[f];
    // thresholds outside the current box route everything to one side
    if t <= lo {
        return partition_node(tree, node.right as usize, bounds, fi, fj, agg, output);
    }
    if t > hi {
        return partition_node(tree, node.left as usize, bounds, fi, fj, agg, output);
    }
    let mut lb = bounds.clone();
    lb[f].1 = t;
    let mut rb = bounds;
    rb[f].0 = t;
    let left = partition_node(tree, node.left as usize, lb, fi, fj, agg, output);
    let right = partition_node(tree, node.right as usize, rb, fi, fj, agg, output);
    if f == fi || f == fj {
        let mut out = left;
        out.extend(right);
        out
    } else {
        let (wl, wr) = (t - lo, hi - t);
        refine(&left, &right, |a, b| combine(agg, a, wl, b, wr))
    }
}

/// Distinct split features used by the tree.
pub fn used_features(core: &TreeCore) -> BTreeSet<usize> {
    core.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.feature as usize).collect()
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NodeRepr {
    Split {
        feature: u32,
        threshold: f64,
        n_samples: u32,
        impurity: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<u32>,
        left: Box<NodeRepr>,
        right: Box<NodeRepr>,
    },
    Leaf {
        value: u32,
        n_samples: u32,
        impurity: f64,
    },
}

fn to_repr(core: &TreeCore, id: usize) -> NodeRepr {
    let n = &core.nodes[id];
    if n.is_leaf() {
        NodeRepr::Leaf {
            value: n.value,
            n_samples: n.n_samples,
            impurity: n.impurity,
        }
    } else {
        NodeRepr::Split {
            feature: n.feature,
            threshold: n.threshold,
            n_samples: n.n_samples,
            impurity: n.impurity,
            value: (n.value != NONE).then_some(n.value),
            left: Box::new(to_repr(core, n.left as usize)),
            right: Box::new(to_repr(core, n.right as usize)),
        }
    }
}

fn blank_node() -> Node {
    Node {
        feature: NONE,
        threshold: 0.0,
        left: NONE,
        right: NONE,
        n_samples: 0,
        impurity: 0.0,
        value: NONE,
    }
}

/// Fills `nodes[id]` from `repr`, allocating children as adjacent pairs.
fn from_repr(repr: &NodeRepr, id: usize, nodes: &mut Vec<Node>) {
    match repr {
        NodeRepr::Leaf {
            value,
            n_samples,
            impurity,
        } => {
            nodes[id] = Node {
                n_samples: *n_samples,
                impurity: *impurity,
                value: *value,
                ..blank_node()
            }
        }
        NodeRepr::Split {
            feature,
            threshold,
            n_samples,
            impurity,
            value,
            left,
            right,
        } => {
            let l = nodes.len();
            nodes.push(blank_node());
            nodes.push(blank_node());
            nodes[id] = Node {
                feature: *feature,
                threshold: *threshold,
                left: l as u32,
                right: l as u32 + 1,
                n_samples: *n_samples,
                impurity: *impurity,
                value: value.unwrap_or(NONE),
            };
            from_repr(left, l, nodes);
            from_repr(right, l + 1, nodes);
        }
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CoreRepr {
    n_features: usize,
    n_outputs: usize,
    feature_ranges: Vec<(f64, f64)>,
    root: NodeRepr,
}

impl CoreRepr {
    pub(crate) fn from_core(core: &TreeCore) -> Self {
        CoreRepr {
            n_features: core.n_features,
            n_outputs: core.n_outputs,
            feature_ranges: core.feature_ranges.clone(),
            root: to_repr(core, 0),
        }
    }

    pub(crate) fn into_core(self, n_values: usize) -> Result<TreeCore> {
        let mut nodes = vec![blank_node()];
        from_repr(&self.root, 0, &mut nodes);
        if self.feature_ranges.len() != self.n_features {
            return Err(Error::InvalidArgument("feature range count differs from n_features".into()));
        }
        for n in &nodes {
            if !n.is_leaf() && n.feature as usize >= self.n_features {
                return Err(Error::IndexOutOfRange {
                    index: n.feature as usize,
                    limit: self.n_features,
                });
            }
            if n.is_leaf() && n.value as usize >= n_values {
                return Err(Error::IndexOutOfRange {
                    index: n.value as usize,
                    limit: n_values,
                });
            }
        }
        Ok(TreeCore {
            nodes,
            n_features: self.n_features,
            n_outputs: self.n_outputs,
            feature_ranges: self.feature_ranges,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct TreeRepr {
    params: FitParams,
    tree: CoreRepr,
    values: Vec<Vec<f64>>,
}

impl From<Tree> for TreeRepr {
    fn from(t: Tree) -> Self {
        let m = t.core.n_outputs;
        TreeRepr {
            tree: CoreRepr::from_core(&t.core),
            values: t.values.chunks(m).map(<[f64]>::to_vec).collect(),
            params: t.params,
        }
    }
}

impl TryFrom<TreeRepr> for Tree {
    type Error = Error;

    fn try_from(repr: TreeRepr) -> Result<Tree> {
        let core = repr.tree.into_core(repr.values.len())?;
        if repr.values.iter().any(|r| r.len() != core.n_outputs) {
            return Err(Error::DimensionMismatch {
                expected: core.n_outputs,
                got: repr.values.first().map_or(0, Vec::len),
                context: "tree value rows",
            });
        }
        Ok(Tree {
            core,
            values: repr.values.concat(),
            params: repr.params,
        })
    }
}

/// JSON reader without the nesting limit, for deep trees.
pub fn from_json_deep<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    de.disable_recursion_limit();
    let v = T::deserialize(&mut de)?;
    de.end()?;
    Ok(v)
}

impl Tree {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Tree> {
        from_json_deep(text)
    }
}

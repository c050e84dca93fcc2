//! B-splines: basis evaluation, curve interpolation and least-squares approximation
//! with knot re-placement, tensor-product surfaces fitted in two passes, and families
//! of curves/surfaces indexed by the remaining features.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 4;

/// Default segment count for `n_sites` data sites.
pub fn default_segments(n_sites: usize) -> usize {
    4.max(n_sites.div_ceil(5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    pub knots: Vec<f64>,
    pub order: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("spline order must be at least 1".into()));
        }
        if knots.len() < 2 * order {
            return Err(Error::InvalidArgument(format!(
                "{} knots cannot carry order {order}",
                knots.len()
            )));
        }
        if knots.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("knot sequence"));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("knots must be non-decreasing".into()));
        }
        let (a, b) = (knots[0], knots[knots.len() - 1]);
        if a >= b {
            return Err(Error::InvalidArgument("knot span is empty".into()));
        }
        let count = |v: f64| knots.iter().filter(|&&t| t == v).count();
        if count(a) != order || count(b) != order {
            return Err(Error::InvalidArgument(format!(
                "boundary knots must appear exactly {order} times"
            )));
        }
        let mut i = 0;
        while i < knots.len() {
            let mut j = i;
            while j < knots.len() && knots[j] == knots[i] {
                j += 1;
            }
            if j - i > order {
                return Err(Error::InvalidArgument(format!(
                    "knot {} has multiplicity {} > {order}",
                    knots[i],
                    j - i
                )));
            }
            i = j;
        }
        Ok(KnotVector { knots, order })
    }

    /// Boundary breaks repeated `order` times, interior breaks once.
    pub fn from_breaks(breaks: &[f64], order: usize) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(Error::InvalidArgument("need at least two break points".into()));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("break points must be strictly increasing".into()));
        }
        let mut knots = vec![breaks[0]; order];
        knots.extend_from_slice(&breaks[1..breaks.len() - 1]);
        knots.extend(std::iter::repeat_n(breaks[breaks.len() - 1], order));
        KnotVector::new(knots, order)
    }

    pub fn uniform(a: f64, b: f64, n_segments: usize, order: usize) -> Result<Self> {
        if n_segments == 0 {
            return Err(Error::InvalidArgument("at least one segment is required".into()));
        }
        let breaks: Vec<f64> = (0..=n_segments)
            .map(|i| if i == n_segments { b } else { a + (b - a) * i as f64 / n_segments as f64 })
            .collect();
        KnotVector::from_breaks(&breaks, order)
    }

    pub fn n_coeffs(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots[self.order - 1], self.knots[self.n_coeffs()])
    }

    /// Distinct break points.
    pub fn breaks(&self) -> Vec<f64> {
        let (a, b) = self.span();
        let mut br: Vec<f64> = self.knots.iter().copied().filter(|&t| t >= a && t <= b).collect();
        br.dedup();
        br
    }

    fn check(&self, x: f64) -> Result<()> {
        let (a, b) = self.span();
        if !(x >= a && x <= b) {
            return Err(Error::InvalidArgument(format!("x = {x} outside knot span [{a}, {b}]")));
        }
        Ok(())
    }

    /// Interval `i` with `t_i <= x < t_{i+1}`; the right end of the span belongs to the
    /// last non-empty interval.
    fn interval(&self, x: f64) -> usize {
        let k = self.order;
        let n = self.n_coeffs();
        let i = self.knots.partition_point(|&t| t <= x);
        let mut i = i.saturating_sub(1).clamp(k - 1, n - 1);
        while i > k - 1 && self.knots[i] == self.knots[i + 1] {
            i -= 1;
        }
        i
    }

    /// Interval `i` with `t_i < x <= t_{i+1}` (for left limits).
    fn interval_left(&self, x: f64) -> usize {
        let k = self.order;
        let n = self.n_coeffs();
        let i = self.knots.partition_point(|&t| t < x);
        let mut i = i.saturating_sub(1).clamp(k - 1, n - 1);
        while i < n - 1 && self.knots[i] == self.knots[i + 1] {
            i += 1;
        }
        i
    }

    /// The `order` non-zero basis values at `x` on interval `i`, for B_{i-k+1} .. B_i.
    fn nonzero(&self, i: usize, x: f64, out: &mut [f64]) {
        let k = self.order;
        let t = &self.knots;
        let mut dl = [0.0f64; 32];
        let mut dr = [0.0f64; 32];
        let (dl, dr) = if k <= 32 {
            (&mut dl[..k], &mut dr[..k])
        } else {
            unreachable!("orders above 32 are not supported")
        };
        out[0] = 1.0;
        for j in 0..k - 1 {
            dr[j] = t[i + 1 + j] - x;
            dl[j] = x - t[i - j];
            let mut saved = 0.0;
            for r in 0..=j {
                let den = dr[r] + dl[j - r];
                let term = if den != 0.0 { out[r] / den } else { 0.0 };
                out[r] = saved + dr[r] * term;
                saved = dl[j - r] * term;
            }
            out[j + 1] = saved;
        }
    }

    /// Dense row of all basis values at `x`.
    pub fn basis_row(&self, x: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut row = vec![0.0; self.n_coeffs()];
        let i = self.interval(x);
        let mut b = vec![0.0; self.order];
        self.nonzero(i, x, &mut b);
        row[i + 1 - self.order..=i].copy_from_slice(&b);
        Ok(row)
    }
}

/// B_{j,k}(x) by the Cox-de Boor recursion. The order-1 functions are indicators of
/// `[t_j, t_{j+1})`, except that the last non-empty interval also contains the right
/// end of the span.
pub fn basis(kv: &KnotVector, j: usize, x: f64) -> Result<f64> {
    kv.check(x)?;
    if j >= kv.n_coeffs() {
        return Err(Error::IndexOutOfRange {
            index: j,
            limit: kv.n_coeffs(),
        });
    }
    let t = &kv.knots;
    let last = kv.interval(kv.span().1);
    let k = kv.order;
    // level-1 values for indices j..j+k
    let mut b: Vec<f64> = (j..j + k)
        .map(|i| {
            let inside = t[i] <= x && x < t[i + 1];
            let right_end = i == last && x == t[i + 1];
            if inside || right_end {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for order in 2..=k {
        for (r, i) in (j..j + k + 1 - order).enumerate() {
            let mut v = 0.0;
            let d1 = t[i + order - 1] - t[i];
            if d1 > 0.0 {
                v += (x - t[i]) / d1 * b[r];
            }
            let d2 = t[i + order] - t[i + 1];
            if d2 > 0.0 {
                v += (t[i + order] - x) / d2 * b[r + 1];
            }
            b[r] = v;
        }
    }
    Ok(b[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineCurve {
    pub knots: KnotVector,
    pub coeffs: Vec<f64>,
}

impl BSplineCurve {
    pub fn new(knots: KnotVector, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != knots.n_coeffs() {
            return Err(Error::DimensionMismatch {
                expected: knots.n_coeffs(),
                got: coeffs.len(),
                context: "spline coefficients",
            });
        }
        Ok(BSplineCurve { knots, coeffs })
    }

    pub fn order(&self) -> usize {
        self.knots.order
    }

    fn eval_on(&self, i: usize, x: f64) -> f64 {
        let k = self.order();
        let mut b = [0.0f64; 32];
        self.knots.nonzero(i, x, &mut b[..k]);
        (0..k).map(|r| b[r] * self.coeffs[i + 1 + r - k]).sum()
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        self.knots.check(x)?;
        Ok(self.eval_on(self.knots.interval(x), x))
    }

    /// Limit from the left at `x`.
    pub fn eval_left(&self, x: f64) -> Result<f64> {
        self.knots.check(x)?;
        Ok(self.eval_on(self.knots.interval_left(x), x))
    }

    /// Evaluation with `x` clamped to the span.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        let (a, b) = self.knots.span();
        let x = x.clamp(a, b);
        self.eval_on(self.knots.interval(x), x)
    }

    /// First derivative as a curve of one order less.
    pub fn derivative(&self) -> Result<BSplineCurve> {
        let k = self.order();
        if k < 2 {
            return Err(Error::InvalidArgument("cannot differentiate an order-1 spline".into()));
        }
        let t = &self.knots.knots;
        let n = self.coeffs.len();
        let coeffs: Vec<f64> = (1..n)
            .map(|j| {
                let d = t[j + k - 1] - t[j];
                if d > 0.0 {
                    (k - 1) as f64 * (self.coeffs[j] - self.coeffs[j - 1]) / d
                } else {
                    0.0
                }
            })
            .collect();
        let knots = KnotVector {
            knots: t[1..t.len() - 1].to_vec(),
            order: k - 1,
        };
        Ok(BSplineCurve { knots, coeffs })
    }
}

fn check_sites(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
            context: "data sites vs values",
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline data"));
    }
    Ok(())
}

fn design(kv: &KnotVector, xs: &[f64]) -> Result<DMatrix<f64>> {
    let n = kv.n_coeffs();
    let mut m = DMatrix::zeros(xs.len(), n);
    for (r, &x) in xs.iter().enumerate() {
        let row = kv.basis_row(x)?;
        for (c, v) in row.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

/// Interpolating spline through strictly increasing sites; interior knots by the
/// averaging rule `t_{j+k} = mean(x_{j+1} .. x_{j+k-1})`.
pub fn interpolate_1d(xs: &[f64], ys: &[f64], k: usize) -> Result<BSplineCurve> {
    check_sites(xs, ys)?;
    let n = xs.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("{n} sites cannot determine an order-{k} interpolant")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Singular("interpolation sites must be strictly increasing".into()));
    }
    let kv = averaging_knots(xs, k)?;
    let a = design(&kv, xs)?;
    let coeffs = a
        .lu()
        .solve(&DVector::from_column_slice(ys))
        .ok_or_else(|| Error::Singular("collocation matrix".into()))?;
    BSplineCurve::new(kv, coeffs.iter().copied().collect())
}

/// Knots for interpolation at `xs` (one coefficient per site).
pub fn averaging_knots(xs: &[f64], k: usize) -> Result<KnotVector> {
    let n = xs.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("{n} sites cannot determine an order-{k} interpolant")));
    }
    let mut knots = vec![xs[0]; k];
    for j in 1..n - k + 1 {
        let avg = xs[j..j + k - 1].iter().sum::<f64>() / (k - 1).max(1) as f64;
        knots.push(if k == 1 { xs[j] } else { avg });
    }
    knots.extend(std::iter::repeat_n(xs[n - 1], k));
    KnotVector::new(knots, k)
}

/// Schoenberg-Whitney condition for least squares: an increasing selection of sites
/// with `t_j < x_{i_j} < t_{j+k}` must exist (boundary sites may touch the ends).
pub fn schoenberg_whitney(kv: &KnotVector, xs: &[f64]) -> bool {
    let t = &kv.knots;
    let k = kv.order;
    let (a, b) = kv.span();
    let mut i = 0;
    for j in 0..kv.n_coeffs() {
        let lo = t[j];
        let hi = t[j + k];
        while i < xs.len() {
            let x = xs[i];
            i += 1;
            let above = x > lo || (x == a && lo == a);
            let below = x < hi || (x == b && hi == b);
            if above && below {
                break;
            }
            if i == xs.len() {
                return false;
            }
        }
        if i > xs.len() {
            return false;
        }
        if j + 1 < kv.n_coeffs() && i == xs.len() {
            return false;
        }
    }
    true
}

/// Least-squares coefficients for a fixed knot vector (normal equations, Cholesky).
pub fn least_squares(kv: &KnotVector, xs: &[f64], ys: &[f64]) -> Result<BSplineCurve> {
    check_sites(xs, ys)?;
    if xs.len() < kv.n_coeffs() {
        return Err(Error::Singular(format!(
            "{} sites for {} coefficients",
            xs.len(),
            kv.n_coeffs()
        )));
    }
    let a = design(kv, xs)?;
    let ata = a.transpose() * &a;
    let aty = a.transpose() * DVector::from_column_slice(ys);
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Singular("least-squares design matrix is rank deficient".into()))?;
    let coeffs = chol.solve(&aty);
    BSplineCurve::new(kv.clone(), coeffs.iter().copied().collect())
}

/// Knot re-placement: estimates |D^k f| from the jumps of the piecewise constant
/// D^{k-1} f, and places the same number of breaks so that each interval carries an
/// equal share of the integral of `|D^k f|^(1/k)` plus a floor.
pub fn newknt(curve: &BSplineCurve, floor_fraction: f64) -> Result<KnotVector> {
    let k = curve.order();
    let breaks = curve.knots.breaks();
    let l = breaks.len() - 1;
    if k < 2 || l < 2 {
        return Ok(curve.knots.clone());
    }
    let mut d = curve.clone();
    for _ in 0..k - 1 {
        d = d.derivative()?;
    }
    let piece: Vec<f64> = (0..l)
        .map(|i| d.eval(0.5 * (breaks[i] + breaks[i + 1])))
        .collect::<Result<_>>()?;
    // |D^k f| at interior breaks: jump over the distance between neighbouring midpoints
    let jump: Vec<f64> = (1..l)
        .map(|j| (piece[j] - piece[j - 1]).abs() / (0.5 * (breaks[j + 1] - breaks[j - 1])))
        .collect();
    let mut density: Vec<f64> = (0..l)
        .map(|i| {
            let left = if i > 0 { Some(jump[i - 1]) } else { None };
            let right = if i < l - 1 { Some(jump[i]) } else { None };
            let v = match (left, right) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => 0.0,
            };
            v.powf(1.0 / k as f64)
        })
        .collect();
    let len = breaks[l] - breaks[0];
    let mean = density
        .iter()
        .zip(breaks.windows(2))
        .map(|(g, w)| g * (w[1] - w[0]))
        .sum::<f64>()
        / len;
    let floor = if mean > 0.0 { floor_fraction * mean } else { 1.0 };
    density.iter_mut().for_each(|g| *g += floor);

    let mut cum = vec![0.0; l + 1];
    for i in 0..l {
        cum[i + 1] = cum[i] + density[i] * (breaks[i + 1] - breaks[i]);
    }
    let total = cum[l];
    let mut new = vec![breaks[0]];
    let mut i = 0;
    for j in 1..l {
        let target = total * j as f64 / l as f64;
        while cum[i + 1] < target {
            i += 1;
        }
        let x = breaks[i] + (target - cum[i]) / density[i];
        new.push(x.clamp(breaks[i], breaks[i + 1]));
    }
    new.push(breaks[l]);
    new.dedup();
    KnotVector::from_breaks(&new, k)
}

/// Least-squares spline on `n_segments` uniform segments, optionally followed by one
/// knot re-placement pass and a re-fit.
pub fn approximate_1d(
    xs: &[f64],
    ys: &[f64],
    n_segments: usize,
    k: usize,
    optimize_knots: bool,
) -> Result<BSplineCurve> {
    check_sites(xs, ys)?;
    if xs.is_empty() {
        return Err(Error::EmptyInput("spline data"));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("data sites must be increasing".into()));
    }
    let kv = KnotVector::uniform(xs[0], xs[xs.len() - 1], n_segments, k)?;
    if !schoenberg_whitney(&kv, xs) {
        return Err(Error::Singular(format!(
            "{n_segments} segments of order {k} are not determined by {} sites",
            xs.len()
        )));
    }
    let uniform = least_squares(&kv, xs, ys)?;
    if !optimize_knots {
        return Ok(uniform);
    }
    // re-placement only pays off once the current fit resolves the data, so several
    // passes are tried and the best residual wins
    let mut best_sse = sse(&uniform, xs, ys)?;
    let mut best = uniform;
    let mut current = best.clone();
    for _ in 0..KNOT_PASSES {
        let Some(next) = replace_knots(&current, xs, ys)? else { break };
        let e = sse(&next, xs, ys)?;
        if e < best_sse {
            best_sse = e;
            best = next.clone();
        }
        current = next;
    }
    Ok(best)
}

const KNOT_PASSES: usize = 3;

fn replace_knots(curve: &BSplineCurve, xs: &[f64], ys: &[f64]) -> Result<Option<BSplineCurve>> {
    let mut floor = 0.1;
    for _ in 0..8 {
        let kv = newknt(curve, floor)?;
        if kv.n_coeffs() == curve.knots.n_coeffs() && schoenberg_whitney(&kv, xs) {
            if let Ok(c) = least_squares(&kv, xs, ys) {
                return Ok(Some(c));
            }
        }
        floor *= 4.0;
    }
    Ok(None)
}

/// Sum of squared residuals at the data sites.
pub fn sse(curve: &BSplineCurve, xs: &[f64], ys: &[f64]) -> Result<f64> {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| curve.eval(x).map(|v| (v - y).powi(2)))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSurface {
    pub knots_x: KnotVector,
    pub knots_y: KnotVector,
    /// `coeffs[j][v]`, shape `n_coeffs(x) x n_coeffs(y)`.
    pub coeffs: Vec<Vec<f64>>,
}

impl TensorSurface {
    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        let bx = self.knots_x.basis_row(x)?;
        let by = self.knots_y.basis_row(y)?;
        Ok(tensor_sum(&bx, &by, &self.coeffs))
    }

    pub fn eval_clamped(&self, x: f64, y: f64) -> f64 {
        let (ax, bx) = self.knots_x.span();
        let (ay, by) = self.knots_y.span();
        self.eval(x.clamp(ax, bx), y.clamp(ay, by)).expect("clamped into span")
    }
}

fn tensor_sum(bx: &[f64], by: &[f64], a: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (j, &u) in bx.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        for (v, &w) in by.iter().enumerate() {
            s += u * a[j][v] * w;
        }
    }
    s
}

/// `(B^T B)^-1 B^T` for the design matrix at the sites.
fn ls_projector(kv: &KnotVector, sites: &[f64]) -> Result<DMatrix<f64>> {
    if sites.len() < kv.n_coeffs() || !schoenberg_whitney(kv, sites) {
        return Err(Error::Singular(format!(
            "{} sites cannot determine {} coefficients",
            sites.len(),
            kv.n_coeffs()
        )));
    }
    let b = design(kv, sites)?;
    let chol = (b.transpose() * &b)
        .cholesky()
        .ok_or_else(|| Error::Singular("tensor design matrix is rank deficient".into()))?;
    Ok(chol.solve(&b.transpose()))
}

/// Direction of the two-step fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitOrder {
    XThenY,
    YThenX,
}

/// Two-step tensor fit: one least-squares curve along x per y site, then the curve
/// coefficients are approximated along y. `z_grid[i][j]` is the value at
/// `(x_sites[i], y_sites[j])`.
pub fn fit_2d(
    x_sites: &[f64],
    y_sites: &[f64],
    z_grid: &[Vec<f64>],
    knots_x: &KnotVector,
    knots_y: &KnotVector,
) -> Result<TensorSurface> {
    fit_2d_ordered(x_sites, y_sites, z_grid, knots_x, knots_y, FitOrder::XThenY)
}

pub fn fit_2d_ordered(
    x_sites: &[f64],
    y_sites: &[f64],
    z_grid: &[Vec<f64>],
    knots_x: &KnotVector,
    knots_y: &KnotVector,
    order: FitOrder,
) -> Result<TensorSurface> {
    if z_grid.len() != x_sites.len() {
        return Err(Error::IncompleteGrid(format!(
            "{} rows of values for {} x sites",
            z_grid.len(),
            x_sites.len()
        )));
    }
    if let Some((i, row)) = z_grid.iter().enumerate().find(|(_, r)| r.len() != y_sites.len()) {
        return Err(Error::IncompleteGrid(format!(
            "x site {i} has {} values for {} y sites",
            row.len(),
            y_sites.len()
        )));
    }
    if z_grid.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::IncompleteGrid("grid contains missing or non-finite values".into()));
    }
    let z = DMatrix::from_fn(x_sites.len(), y_sites.len(), |i, j| z_grid[i][j]);
    let px = ls_projector(knots_x, x_sites)?;
    let py = ls_projector(knots_y, y_sites)?;
    let a = match order {
        // per y site, curve coefficients along x; then each coefficient row along y
        FitOrder::XThenY => (&px * &z) * py.transpose(),
        FitOrder::YThenX => &px * (&z * py.transpose()),
    };
    Ok(TensorSurface {
        knots_x: knots_x.clone(),
        knots_y: knots_y.clone(),
        coeffs: (0..a.nrows()).map(|j| a.row(j).iter().copied().collect()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineKind {
    #[serde(rename = "1DLI")]
    Li1d,
    #[serde(rename = "1DLA")]
    La1d,
    #[serde(rename = "2DLA")]
    La2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Member {
    Curve(BSplineCurve),
    Surface(TensorSurface),
}

impl Member {
    fn eval(&self, s: &[f64], clamp: bool) -> Result<f64> {
        match self {
            Member::Curve(c) if clamp => Ok(c.eval_clamped(s[0])),
            Member::Curve(c) => c.eval(s[0]),
            Member::Surface(f) if clamp => Ok(f.eval_clamped(s[0], s[1])),
            Member::Surface(f) => f.eval(s[0], s[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineSettings {
    pub order: usize,
    /// Segments along the first swept axis (default from the site count).
    pub n_segments: Option<usize>,
    /// Segments along the second swept axis of surfaces.
    pub n_segments_y: Option<usize>,
    pub optimize_knots: bool,
}

impl Default for SplineSettings {
    fn default() -> Self {
        SplineSettings {
            order: DEFAULT_ORDER,
            n_segments: None,
            n_segments_y: None,
            optimize_knots: true,
        }
    }
}

/// One curve or surface per combination of the non-swept features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineFamily {
    pub kind: SplineKind,
    pub feature_names: Vec<String>,
    /// Swept feature indices: one for curves, two (x then y) for surfaces.
    pub swept: Vec<usize>,
    /// Non-swept feature indices.
    pub other: Vec<usize>,
    /// Sorted distinct training values of each non-swept feature.
    pub grid: Vec<Vec<f64>>,
    /// Members in lexicographic order of `grid` (last feature fastest).
    pub members: Vec<Member>,
}

fn distinct_sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Groups rows by the values of the `other` features and checks grid completeness.
fn group_rows(x: &DMatrix<f64>, other: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let grid: Vec<Vec<f64>> = other.iter().map(|&f| distinct_sorted(x.column(f).iter().copied())).collect();
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for r in 0..x.nrows() {
        let idx: Vec<usize> = other
            .iter()
            .zip(&grid)
            .map(|(&f, g)| g.partition_point(|&v| v < x[(r, f)]))
            .collect();
        groups.entry(idx).or_default().push(r);
    }
    let expected: usize = grid.iter().map(Vec::len).product();
    if groups.len() != expected {
        return Err(Error::IncompleteGrid(format!(
            "{} of {expected} feature combinations present",
            groups.len()
        )));
    }
    Ok((grid, groups.into_values().collect()))
}

fn check_columns(x: &DMatrix<f64>, y: &[f64], swept: &[usize]) -> Result<Vec<usize>> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
            context: "rows vs target values",
        });
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("spline family data"));
    }
    for &s in swept {
        if s >= x.ncols() {
            return Err(Error::IndexOutOfRange {
                index: s,
                limit: x.ncols(),
            });
        }
    }
    Ok((0..x.ncols()).filter(|f| !swept.contains(f)).collect())
}

/// Sites and values of one group along feature `f`, sorted by site.
fn sorted_group(x: &DMatrix<f64>, y: &[f64], rows: &[usize], f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, f64)> = rows.iter().map(|&r| (x[(r, f)], y[r])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// 1DLI or 1DLA family over one swept feature.
pub fn fit_family_1d(
    x: &DMatrix<f64>,
    y: &[f64],
    feature_names: &[String],
    swept: usize,
    kind: SplineKind,
    settings: &SplineSettings,
) -> Result<SplineFamily> {
    let other = check_columns(x, y, &[swept])?;
    let (grid, groups) = group_rows(x, &other)?;
    let members = groups
        .iter()
        .map(|rows| {
            let (xs, ys) = sorted_group(x, y, rows, swept);
            let curve = match kind {
                SplineKind::Li1d => interpolate_1d(&xs, &ys, settings.order)?,
                SplineKind::La1d => approximate_1d(
                    &xs,
                    &ys,
                    settings.n_segments.unwrap_or_else(|| default_segments(xs.len())),
                    settings.order,
                    settings.optimize_knots,
                )?,
                SplineKind::La2d => {
                    return Err(Error::InvalidArgument("2DLA families need two swept features".into()))
                }
            };
            Ok(Member::Curve(curve))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplineFamily {
        kind,
        feature_names: feature_names.to_vec(),
        swept: vec![swept],
        other,
        grid,
        members,
    })
}

/// Element-wise mean of knot vectors of equal length, re-validated.
fn average_knots(kvs: &[KnotVector]) -> Option<KnotVector> {
    let first = kvs.first()?;
    if kvs.iter().any(|k| k.knots.len() != first.knots.len() || k.order != first.order) {
        return None;
    }
    let knots: Vec<f64> = (0..first.knots.len())
        .map(|i| {
            // shared knots (the span ends) are kept bit for bit
            if kvs.iter().all(|k| k.knots[i] == first.knots[i]) {
                first.knots[i]
            } else {
                kvs.iter().map(|k| k.knots[i]).sum::<f64>() / kvs.len() as f64
            }
        })
        .collect();
    KnotVector::new(knots, first.order).ok()
}

/// 2DLA family: one surface over (`sx`, `sy`) per combination of the other features.
/// The x knots of each surface are the average of the optimized 1DLA knots fitted
/// along x for every y site of that surface.
pub fn fit_family_2d(
    x: &DMatrix<f64>,
    y: &[f64],
    feature_names: &[String],
    sx: usize,
    sy: usize,
    settings: &SplineSettings,
) -> Result<SplineFamily> {
    if sx == sy {
        return Err(Error::InvalidArgument("surface axes must differ".into()));
    }
    let other = check_columns(x, y, &[sx, sy])?;
    let (grid, groups) = group_rows(x, &other)?;
    let k = settings.order;
    let members = groups
        .iter()
        .map(|rows| {
            let xs = distinct_sorted(rows.iter().map(|&r| x[(r, sx)]));
            let ys = distinct_sorted(rows.iter().map(|&r| x[(r, sy)]));
            if xs.len() * ys.len() != rows.len() {
                return Err(Error::IncompleteGrid(format!(
                    "surface grid has {} points for {} x {} sites",
                    rows.len(),
                    xs.len(),
                    ys.len()
                )));
            }
            let mut z = vec![vec![f64::NAN; ys.len()]; xs.len()];
            for &r in rows {
                let i = xs.partition_point(|&v| v < x[(r, sx)]);
                let j = ys.partition_point(|&v| v < x[(r, sy)]);
                z[i][j] = y[r];
            }
            let segs_x = settings.n_segments.unwrap_or_else(|| default_segments(xs.len()));
            let uniform_x = KnotVector::uniform(xs[0], xs[xs.len() - 1], segs_x, k)?;
            let knots_x = if settings.optimize_knots {
                let per_site: Vec<KnotVector> = (0..ys.len())
                    .map(|j| {
                        let col: Vec<f64> = z.iter().map(|row| row[j]).collect();
                        approximate_1d(&xs, &col, segs_x, k, true).map(|c| c.knots)
                    })
                    .collect::<Result<_>>()?;
                average_knots(&per_site)
                    .filter(|kv| schoenberg_whitney(kv, &xs))
                    .unwrap_or(uniform_x)
            } else {
                uniform_x
            };
            let ky = k.min(ys.len());
            let segs_y = settings
                .n_segments_y
                .unwrap_or_else(|| default_segments(ys.len()))
                .min(ys.len() + 1 - ky)
                .max(1);
            let knots_y = if segs_y + ky - 1 == ys.len() {
                averaging_knots(&ys, ky)?
            } else {
                KnotVector::uniform(ys[0], ys[ys.len() - 1], segs_y, ky)?
            };
            Ok(Member::Surface(fit_2d(&xs, &ys, &z, &knots_x, &knots_y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplineFamily {
        kind: SplineKind::La2d,
        feature_names: feature_names.to_vec(),
        swept: vec![sx, sy],
        other,
        grid,
        members,
    })
}

impl SplineFamily {
    pub fn n_features(&self) -> usize {
        self.swept.len() + self.other.len()
    }

    fn member_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.grid).fold(0, |acc, (&i, g)| acc * g.len() + i)
    }

    /// Swept-coordinate range of the members (taken from the first member).
    fn swept_span(&self) -> Vec<(f64, f64)> {
        match &self.members[0] {
            Member::Curve(c) => vec![c.knots.span()],
            Member::Surface(s) => vec![s.knots_x.span(), s.knots_y.span()],
        }
    }

    /// Evaluates the bracketing members at the swept coordinates and interpolates
    /// linearly across each non-swept feature. Points outside the training hull are
    /// rejected unless `allow_extrapolation`, in which case they are clamped.
    pub fn predict(&self, point: &[f64], allow_extrapolation: bool) -> Result<f64> {
        if point.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: point.len(),
                context: "feature vector length",
            });
        }
        let hull = |f: usize, v: f64, lo: f64, hi: f64| -> Result<f64> {
            if v >= lo && v <= hi {
                Ok(v)
            } else if allow_extrapolation {
                Ok(v.clamp(lo, hi))
            } else {
                Err(Error::OutsideHull {
                    feature: self.feature_names.get(f).cloned().unwrap_or_else(|| format!("x{f}")),
                    value: v,
                    lo,
                    hi,
                })
            }
        };
        let mut s = Vec::with_capacity(self.swept.len());
        for (&f, (lo, hi)) in self.swept.iter().zip(self.swept_span()) {
            s.push(hull(f, point[f], lo, hi)?);
        }
        // per non-swept feature: (lower index, upper index, weight of upper)
        let mut brackets = Vec::with_capacity(self.other.len());
        for (&f, g) in self.other.iter().zip(&self.grid) {
            let v = hull(f, point[f], g[0], g[g.len() - 1])?;
            let hi = g.partition_point(|&t| t < v);
            if g[hi.min(g.len() - 1)] == v {
                brackets.push((hi, hi, 0.0));
            } else {
                let lo = hi - 1;
                brackets.push((lo, hi, (v - g[lo]) / (g[hi] - g[lo])));
            }
        }
        let mut total = 0.0;
        let d = brackets.len();
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for (b, &(lo, hi, t)) in brackets.iter().enumerate() {
                let up = (corner >> b) & 1 == 1;
                if lo == hi && up {
                    w = 0.0;
                    break;
                }
                idx[b] = if up { hi } else { lo };
                w *= if up { t } else { 1.0 - t };
            }
            if w == 0.0 {
                continue;
            }
            total += w * self.members[self.member_index(&idx)].eval(&s, allow_extrapolation)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaged_knots_keep_the_span() {
        let a = KnotVector::from_breaks(&[0.01, 0.07, 0.2], 3).unwrap();
        let b = KnotVector::from_breaks(&[0.01, 0.11, 0.2], 3).unwrap();
        let kvs = vec![a.clone(), b, a.clone(), a.clone(), a.clone(), a.clone(), a];
        let avg = average_knots(&kvs).unwrap();
        assert_eq!(avg.span(), (0.01, 0.2));
    }

    #[test]
    fn order_one_indicator() {
        let kv = KnotVector::new(vec![0.0, 1.0], 1).unwrap();
        assert_eq!(basis(&kv, 0, 0.0).unwrap(), 1.0);
        assert_eq!(basis(&kv, 0, 0.5).unwrap(), 1.0);
        assert_eq!(basis(&kv, 0, 1.0).unwrap(), 1.0);
        assert!(basis(&kv, 0, 1.5).is_err());
    }

    #[test]
    fn knot_validation() {
        assert!(KnotVector::new(vec![0.0, 0.0, 1.0, 1.0], 2).is_ok());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).is_err());
        assert!(KnotVector::new(vec![0.0, 1.0, 0.5, 1.0], 2).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn recursion_matches_fast_evaluation() {
        let kv = KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 0.3, 0.5, 0.5, 0.9, 1.0, 1.0, 1.0, 1.0], 4).unwrap();
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            let row = kv.basis_row(x).unwrap();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (j, v) in row.iter().enumerate() {
                assert!((basis(&kv, j, x).unwrap() - v).abs() < 1e-12, "j={j} x={x}");
            }
        }
    }

    #[test]
    fn quadratic_basis_is_c1_at_simple_knot() {
        let kv = KnotVector::from_breaks(&[0.0, 0.4, 1.0], 3).unwrap();
        for j in 0..kv.n_coeffs() {
            let mut coeffs = vec![0.0; kv.n_coeffs()];
            coeffs[j] = 1.0;
            let c = BSplineCurve::new(kv.clone(), coeffs).unwrap();
            let d = c.derivative().unwrap();
            let left = d.eval_left(0.4).unwrap();
            let right = d.eval(0.4).unwrap();
            assert!((left - right).abs() < 1e-8, "basis {j}: {left} vs {right}");
        }
    }

    #[test]
    fn interpolation_reproduces_line() {
        let xs = [0.0, 0.7, 1.1, 2.0, 3.5];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let c = interpolate_1d(&xs, &ys, 4).unwrap();
        for i in 0..=100 {
            let x = 3.5 * i as f64 / 100.0;
            assert!((c.eval(x).unwrap() - (2.0 * x - 1.0)).abs() < 1e-9);
        }
        assert!(interpolate_1d(&[0.0, 1.0, 1.0, 2.0], &[0.0; 4], 4).is_err());
        assert!(interpolate_1d(&[0.0, 1.0], &[0.0; 2], 4).is_err());
    }

    #[test]
    fn least_squares_reproduces_cubic() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 13.0).collect();
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        for segs in [1, 3, 7] {
            for opt in [false, true] {
                let c = approximate_1d(&xs, &ys, segs, 4, opt).unwrap();
                for (&x, &y) in xs.iter().zip(&ys) {
                    assert!((c.eval(x).unwrap() - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn square_least_squares_matches_interpolation() {
        let xs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).powf(1.3)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
        let c = approximate_1d(&xs, &ys, 6, 4, false).unwrap();
        assert_eq!(c.coeffs.len(), xs.len());
        for (&x, &y) in xs.iter().zip(&ys) {
            assert!((c.eval(x).unwrap() - y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_segments_is_rejected() {
        let xs = [0.0, 0.5, 1.0];
        assert!(approximate_1d(&xs, &[0.0, 1.0, 0.0], 8, 4, false).is_err());
    }

    #[test]
    fn knot_optimization_helps_sharp_bend() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (20.0 * (x - 0.5)).tanh()).collect();
        let uni = approximate_1d(&xs, &ys, 20, 4, false).unwrap();
        let opt = approximate_1d(&xs, &ys, 20, 4, true).unwrap();
        let (a, b) = (sse(&uni, &xs, &ys).unwrap(), sse(&opt, &xs, &ys).unwrap());
        assert!(b < 0.01 * a, "optimized {b} vs uniform {a}");
        // under-resolved: never worse than uniform
        let uni = approximate_1d(&xs, &ys, 8, 4, false).unwrap();
        let opt = approximate_1d(&xs, &ys, 8, 4, true).unwrap();
        assert!(sse(&opt, &xs, &ys).unwrap() <= sse(&uni, &xs, &ys).unwrap());
    }

    #[test]
    fn separable_polynomial_surface_is_exact() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let ys: Vec<f64> = (0..9).map(|i| 1.0 + i as f64 / 4.0).collect();
        let g = |x: f64| 1.0 + x - x * x;
        let h = |y: f64| 0.5 * y * y;
        let z: Vec<Vec<f64>> = xs.iter().map(|&x| ys.iter().map(|&y| g(x) * h(y)).collect()).collect();
        let kx = KnotVector::uniform(0.0, 1.0, 3, 4).unwrap();
        let ky = KnotVector::uniform(1.0, 3.0, 2, 3).unwrap();
        let s = fit_2d(&xs, &ys, &z, &kx, &ky).unwrap();
        for i in 0..=20 {
            for j in 0..=20 {
                let (x, y) = (i as f64 / 20.0, 1.0 + 2.0 * j as f64 / 20.0);
                assert!((s.eval(x, y).unwrap() - g(x) * h(y)).abs() < 1e-8);
            }
        }
        let mut holes = z.clone();
        holes[3].pop();
        assert!(matches!(fit_2d(&xs, &ys, &holes, &kx, &ky), Err(Error::IncompleteGrid(_))));
    }

    #[test]
    fn constant_surface() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let z = vec![vec![2.5; 5]; 6];
        let kx = KnotVector::uniform(0.0, 5.0, 2, 4).unwrap();
        let ky = KnotVector::uniform(0.0, 4.0, 1, 4).unwrap();
        let s = fit_2d(&xs, &ys, &z, &kx, &ky).unwrap();
        assert!((s.eval(1.3, 2.7).unwrap() - 2.5).abs() < 1e-12);
    }

    fn family_data() -> (DMatrix<f64>, Vec<f64>) {
        // features: a in {0, 1}, tau in {0.5, 0.7}, r on 12 sites; value linear in tau
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for a in [0.0, 1.0] {
            for tau in [0.5, 0.7] {
                for i in 0..12 {
                    let r = 0.01 + i as f64 * 0.09;
                    rows.extend([a, tau, r]);
                    y.push(a + 10.0 * tau + (3.0 * r).sin());
                }
            }
        }
        (DMatrix::from_row_slice(48, 3, &rows), y)
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "tau".into(), "r".into()]
    }

    #[test]
    fn family_bracketing() {
        let (x, y) = family_data();
        for kind in [SplineKind::Li1d, SplineKind::La1d] {
            let fam = fit_family_1d(&x, &y, &names(), 2, kind, &SplineSettings::default()).unwrap();
            assert_eq!(fam.members.len(), 4);
            let on = fam.predict(&[0.0, 0.5, 0.37], false).unwrap();
            let Member::Curve(c) = &fam.members[0] else { panic!() };
            assert_eq!(on, c.eval(0.37).unwrap());
            let lo = fam.predict(&[1.0, 0.5, 0.37], false).unwrap();
            let hi = fam.predict(&[1.0, 0.7, 0.37], false).unwrap();
            let mid = fam.predict(&[1.0, 0.6, 0.37], false).unwrap();
            assert!((mid - 0.5 * (lo + hi)).abs() < 1e-12);
            assert!(matches!(fam.predict(&[1.0, 0.8, 0.37], false), Err(Error::OutsideHull { .. })));
            assert_eq!(fam.predict(&[1.0, 0.8, 0.37], true).unwrap(), hi);
        }
    }

    #[test]
    fn family_surface() {
        let (x, y) = family_data();
        let fam = fit_family_2d(&x, &y, &names(), 2, 1, &SplineSettings::default()).unwrap();
        assert_eq!(fam.members.len(), 2);
        let p = fam.predict(&[0.5, 0.6, 0.5], false).unwrap();
        let exact = 0.5 + 6.0 + (1.5f64).sin();
        assert!((p - exact).abs() < 1e-3, "{p} vs {exact}");
    }

    #[test]
    fn incomplete_family_grid() {
        let (x, y) = family_data();
        let keep: Vec<usize> = (0..36).collect();
        let xs = DMatrix::from_fn(36, 3, |i, j| x[(keep[i], j)]);
        let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        assert!(matches!(
            fit_family_1d(&xs, &ys, &names(), 2, SplineKind::Li1d, &SplineSettings::default()),
            Err(Error::IncompleteGrid(_))
        ));
    }
}

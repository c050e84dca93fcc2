//! Dense nonsymmetric eigenanalysis and participation factors.
//!
//! The real matrix is reduced to upper Hessenberg form with Householder reflections and
//! then to real Schur form by the implicitly double-shifted (Francis) QR iteration.
//! Eigenvectors come from back-substitution on the quasi-triangular factor followed by
//! the accumulated basis rotation (the EISPACK `orthes`/`hqr2` route). Left eigenvectors
//! are the rows of the inverse of the right-eigenvector matrix, so `psi * phi = I`.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default participation threshold above which a state's group dominates a mode.
pub const DOMINANCE_THRESHOLD: f64 = 0.3;

/// Relative residual tolerance: `||A v - l v|| <= RESIDUAL_TOL * ||A||_F`.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Total QR sweeps allowed per unit of matrix dimension.
pub const SWEEPS_PER_DIM: usize = 30;

const INVERSE_ITERATION_RETRIES: usize = 3;
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ModalSolution {
    pub lambdas: Vec<Complex64>,
    /// Right eigenvectors as columns (N x M).
    pub phi: DMatrix<Complex64>,
    /// Left eigenvectors as rows (M x N), `psi * phi = I`.
    pub psi: DMatrix<Complex64>,
    /// Column-max normalized participation magnitudes (N x M).
    pub p: DMatrix<f64>,
    pub dominant: Vec<BTreeSet<String>>,
}

/// Eigenvalues and participation factors without the eigenvector matrices; this is what
/// sweeps keep per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub lambdas: Vec<Complex64>,
    pub p: DMatrix<f64>,
    pub dominant: Vec<BTreeSet<String>>,
}

impl ModalSolution {
    pub fn summary(&self) -> ModeSummary {
        ModeSummary {
            lambdas: self.lambdas.clone(),
            p: self.p.clone(),
            dominant: self.dominant.clone(),
        }
    }

    /// Reorder modes so that new mode `m` is old mode `perm[m]`.
    pub fn permute(&mut self, perm: &[usize]) {
        self.lambdas = perm.iter().map(|&j| self.lambdas[j]).collect();
        self.phi = select_columns(&self.phi, perm);
        self.psi = select_rows(&self.psi, perm);
        self.p = select_columns(&self.p, perm);
        self.dominant = perm.iter().map(|&j| self.dominant[j].clone()).collect();
    }
}

impl ModeSummary {
    pub fn n_modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn permute(&mut self, perm: &[usize]) {
        self.lambdas = perm.iter().map(|&j| self.lambdas[j]).collect();
        self.p = select_columns(&self.p, perm);
        self.dominant = perm.iter().map(|&j| self.dominant[j].clone()).collect();
    }
}

fn select_columns<T: nalgebra::Scalar>(m: &DMatrix<T>, perm: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), perm.len(), |i, j| m[(i, perm[j])].clone())
}

fn select_rows<T: nalgebra::Scalar>(m: &DMatrix<T>, perm: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(perm.len(), m.ncols(), |i, j| m[(perm[i], j)].clone())
}

/// Order used for eigenvalue lists: real part ascending, then imaginary part ascending.
pub fn pole_order(a: &Complex64, b: &Complex64) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

fn check_square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
            context: "square matrix",
        });
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyInput("matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state matrix"));
    }
    Ok(())
}

/// Real Schur decomposition output: eigenvalues in Schur order and the matching
/// (unnormalized) complex eigenvectors.
struct SchurEigen {
    values: Vec<Complex64>,
    vectors: DMatrix<Complex64>,
}

/// Row-major dense work matrix.
struct Work {
    n: usize,
    data: Vec<f64>,
}

impl Work {
    fn from_matrix(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = a[(i, j)];
            }
        }
        Work { n, data }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Work { n, data }
    }
}

impl std::ops::Index<(usize, usize)> for Work {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Work {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Householder reduction to upper Hessenberg form, accumulating the transformation in `v`.
fn hessenberg(h: &mut Work, v: &mut Work) {
    let n = h.n;
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }
    for m in (1..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in m + 1..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[(i, j)];
            }
            // two divisions avoid underflow
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
}

#[inline]
fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

/// Francis double-shift QR on the Hessenberg matrix `h` down to real Schur form, then
/// back-substitution for eigenvectors. On return `d + i e` are the eigenvalues and the
/// columns of `v` hold eigenvectors (complex pairs as real/imaginary column pairs).
#[allow(unused_assignments)]
fn schur_qr(h: &mut Work, v: &mut Work, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let nn = h.n;
    let low = 0usize;
    let high = nn - 1;
    let eps = f64::EPSILON;
    let max_sweeps = SWEEPS_PER_DIM * nn;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut t, mut w, mut x, mut y): (f64, f64, f64, f64);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let mut n = nn as isize - 1;
    let mut iter = 0usize;
    let mut sweeps = 0usize;
    while n >= low as isize {
        let nu = n as usize;
        // look for a single small sub-diagonal element
        let mut l = nu;
        while l > low {
            s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == nu {
            // one root found
            h[(nu, nu)] += exshift;
            d[nu] = h[(nu, nu)];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == nu - 1 {
            // two roots found
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in nu - 1..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in low..=high {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
            } else {
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(Error::NonConvergence { iterations: sweeps - 1 });
            }
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < nu {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }
            // exceptional shifts
            if iter == 10 {
                exshift += x;
                for i in low..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // look for two consecutive small sub-diagonal elements
            let mut m = nu - 2;
            loop {
                z = h[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - r - s;
                r = h[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // double QR step on rows l..=n and columns m..=n
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in low..=high {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    if norm == 0.0 {
        return Ok(());
    }

    // back-substitute to find vectors of the upper triangular form
    for n in (0..nn).rev() {
        p = d[n];
        q = e[n];
        if q == 0.0 {
            let mut l = n;
            h[(n, n)] = 1.0;
            for i in (0..n).rev() {
                w = h[(i, i)] - p;
                r = 0.0;
                for j in l..=n {
                    r += h[(i, j)] * h[(j, n)];
                }
                if e[i] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        h[(i, n)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
                        t = (x * s - z * r) / q;
                        h[(i, n)] = t;
                        h[(i + 1, n)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[(i, n)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            let mut l = n - 1;
            if h[(n, n - 1)].abs() > h[(n - 1, n)].abs() {
                h[(n - 1, n - 1)] = q / h[(n, n - 1)];
                h[(n - 1, n)] = -(h[(n, n)] - p) / h[(n, n - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[(n - 1, n)], h[(n - 1, n - 1)] - p, q);
                h[(n - 1, n - 1)] = cr;
                h[(n - 1, n)] = ci;
            }
            h[(n, n - 1)] = 0.0;
            h[(n, n)] = 1.0;
            for i in (0..n.saturating_sub(1)).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += h[(i, j)] * h[(j, n - 1)];
                    sa += h[(i, j)] * h[(j, n)];
                }
                w = h[(i, i)] - p;
                if e[i] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        let mut vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
                        let vi = (d[i] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) = cdiv(
                            x * r - z * ra + q * sa,
                            x * s - z * sa - q * ra,
                            vr,
                            vi,
                        );
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[(i + 1, n - 1)] = (-ra - w * h[(i, n - 1)] + q * h[(i, n)]) / x;
                            h[(i + 1, n)] = (-sa - w * h[(i, n)] - q * h[(i, n - 1)]) / x;
                        } else {
                            let (cr, ci) = cdiv(-r - y * h[(i, n - 1)], -s - y * h[(i, n)], z, q);
                            h[(i + 1, n - 1)] = cr;
                            h[(i + 1, n)] = ci;
                        }
                    }
                    t = h[(i, n - 1)].abs().max(h[(i, n)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n - 1)] /= t;
                            h[(j, n)] /= t;
                        }
                    }
                }
            }
        }
    }

    // back transformation to eigenvectors of the original matrix
    for j in (low..nn).rev() {
        for i in low..=high {
            z = 0.0;
            for k in low..=j.min(high) {
                z += v[(i, k)] * h[(k, j)];
            }
            v[(i, j)] = z;
        }
    }
    Ok(())
}

fn schur_eigen(a: &DMatrix<f64>, want_vectors: bool) -> Result<SchurEigen> {
    check_square(a)?;
    let n = a.nrows();
    let mut h = Work::from_matrix(a);
    let mut v = Work::identity(n);
    hessenberg(&mut h, &mut v);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    schur_qr(&mut h, &mut v, &mut d, &mut e)?;
    let values: Vec<Complex64> = d.iter().zip(&e).map(|(&re, &im)| Complex64::new(re, im)).collect();
    if values.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(Error::NonFinite("eigenvalues"));
    }
    let vectors = if want_vectors {
        let mut vec = DMatrix::<Complex64>::zeros(n, n);
        let mut j = 0;
        while j < n {
            if e[j] == 0.0 {
                for i in 0..n {
                    vec[(i, j)] = Complex64::new(v[(i, j)], 0.0);
                }
                j += 1;
            } else {
                // (j, j+1) hold real and imaginary parts of the vector for d[j] + i e[j]
                for i in 0..n {
                    let c = Complex64::new(v[(i, j)], v[(i, j + 1)]);
                    vec[(i, j)] = c;
                    vec[(i, j + 1)] = c.conj();
                }
                j += 2;
            }
        }
        vec
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(SchurEigen { values, vectors })
}

/// Eigenvalues sorted by (real part, imaginary part). Complex values of a real matrix
/// come out as exact conjugate pairs.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let mut vals = schur_eigen(a, false)?.values;
    vals.sort_by(pole_order);
    Ok(vals)
}

fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn residual(a: &DMatrix<Complex64>, lambda: Complex64, v: &DVector<Complex64>) -> f64 {
    (a * v - v * lambda).norm()
}

/// Unit 2-norm with the largest-magnitude component made real and positive.
fn normalize(v: &mut DVector<Complex64>) -> bool {
    let norm = v.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, c) in v.iter().enumerate() {
        let m = c.norm();
        if m > best_mag {
            best_mag = m;
            best = i;
        }
    }
    let phase = v[best] / v[best].norm();
    let scale = phase.conj() / norm;
    v.iter_mut().for_each(|c| *c *= scale);
    true
}

fn inverse_iteration(
    a: &DMatrix<Complex64>,
    lambda: Complex64,
    a_norm: f64,
    mode: usize,
) -> Result<DVector<Complex64>> {
    let n = a.nrows();
    let tol = RESIDUAL_TOL * a_norm;
    for attempt in 0..INVERSE_ITERATION_RETRIES {
        let delta = if attempt == 0 {
            0.0
        } else {
            1e-10 * a_norm * attempt as f64
        };
        let shift = lambda + Complex64::new(delta, delta);
        let shifted = a - DMatrix::<Complex64>::identity(n, n) * shift;
        let lu = shifted.lu();
        let mut x = DVector::from_fn(n, |i, _| Complex64::new(1.0 + (i as f64) * 1e-3, 0.0));
        let mut ok = true;
        for _ in 0..4 {
            match lu.solve(&x) {
                Some(y) if y.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                    x = y;
                    if !normalize(&mut x) {
                        ok = false;
                        break;
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && residual(a, lambda, &x) <= tol {
            return Ok(x);
        }
    }
    Err(Error::EigenvectorFailure {
        mode,
        reason: format!(
            "inverse iteration did not reach residual {tol:e} after {INVERSE_ITERATION_RETRIES} shifts"
        ),
    })
}

fn complexify(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Right eigenvectors (columns of `phi`, matching `lambdas`) and left eigenvectors
/// (rows of `psi = phi^-1`).
pub fn eigenvectors(
    a: &DMatrix<f64>,
    lambdas: &[Complex64],
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let dec = schur_eigen(a, true)?;
    if lambdas.len() != dec.values.len() {
        return Err(Error::DimensionMismatch {
            expected: dec.values.len(),
            got: lambdas.len(),
            context: "eigenvalue list",
        });
    }
    // pair each requested eigenvalue with the nearest unused Schur eigenvalue
    let mut used = vec![false; dec.values.len()];
    let mut order = Vec::with_capacity(lambdas.len());
    for l in lambdas {
        let j = (0..dec.values.len())
            .filter(|&j| !used[j])
            .min_by(|&i, &j| {
                (dec.values[i] - l)
                    .norm()
                    .total_cmp(&(dec.values[j] - l).norm())
            })
            .expect("as many Schur values as requested");
        used[j] = true;
        order.push(j);
    }
    right_left_vectors(a, lambdas, &dec.vectors, &order)
}

fn right_left_vectors(
    a: &DMatrix<f64>,
    lambdas: &[Complex64],
    vectors: &DMatrix<Complex64>,
    order: &[usize],
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let n = a.nrows();
    let a_norm = frobenius(a);
    let tol = RESIDUAL_TOL * a_norm;
    let ac = complexify(a);
    let mut phi = DMatrix::<Complex64>::zeros(n, n);
    for (m, (&l, &src)) in lambdas.iter().zip(order).enumerate() {
        let mut v: DVector<Complex64> = vectors.column(src).into_owned();
        let good = normalize(&mut v) && residual(&ac, l, &v) <= tol;
        if !good {
            v = inverse_iteration(&ac, l, a_norm, m)?;
        }
        phi.set_column(m, &v);
    }
    let psi = phi.clone().lu().try_inverse().ok_or_else(|| {
        Error::Singular("right eigenvector matrix (defective eigenvalues?)".into())
    })?;
    if psi.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("left eigenvectors"));
    }
    Ok((phi, psi))
}

/// Raw complex participation factors `p_nm = phi[n, m] * psi[m, n]`.
pub fn raw_participation(phi: &DMatrix<Complex64>, psi: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(phi.nrows(), phi.ncols(), |n, m| phi[(n, m)] * psi[(m, n)])
}

/// Participation magnitudes, each column divided by its maximum.
pub fn participation_matrix(phi: &DMatrix<Complex64>, psi: &DMatrix<Complex64>) -> Result<DMatrix<f64>> {
    if psi.nrows() != phi.ncols() || psi.ncols() != phi.nrows() {
        return Err(Error::DimensionMismatch {
            expected: phi.ncols(),
            got: psi.nrows(),
            context: "left/right eigenvector shapes",
        });
    }
    let mut p = raw_participation(phi, psi).map(|c| c.norm());
    for (m, mut col) in p.column_iter_mut().enumerate() {
        let max = col.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0 && max.is_finite()) {
            return Err(Error::EigenvectorFailure {
                mode: m,
                reason: "participation column is zero".into(),
            });
        }
        col.iter_mut().for_each(|v| *v /= max);
    }
    Ok(p)
}

/// For every mode, the groups holding at least one state with normalized participation
/// `>= threshold`.
pub fn dominant_groups(
    p: &DMatrix<f64>,
    group_labels: &[String],
    threshold: f64,
) -> Result<Vec<BTreeSet<String>>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dominance threshold {threshold} must lie in (0, 1]"
        )));
    }
    if group_labels.len() != p.nrows() {
        return Err(Error::DimensionMismatch {
            expected: p.nrows(),
            got: group_labels.len(),
            context: "group labels per state",
        });
    }
    Ok(p.column_iter()
        .map(|col| {
            col.iter()
                .zip(group_labels)
                .filter(|(&v, _)| v >= threshold)
                .map(|(_, g)| g.clone())
                .collect()
        })
        .collect())
}

/// The group of the state with the largest participation in each mode.
pub fn leading_group(p: &DMatrix<f64>, group_labels: &[String]) -> Vec<String> {
    p.column_iter()
        .map(|col| {
            let (i, _) = col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            group_labels[i].clone()
        })
        .collect()
}

/// Full modal analysis of one state matrix: sorted eigenvalues, eigenvectors,
/// participation factors and dominant groups.
pub fn modal_analysis(a: &DMatrix<f64>, group_labels: &[String], threshold: f64) -> Result<ModalSolution> {
    let dec = schur_eigen(a, true)?;
    let mut order: Vec<usize> = (0..dec.values.len()).collect();
    order.sort_by(|&i, &j| pole_order(&dec.values[i], &dec.values[j]));
    let lambdas: Vec<Complex64> = order.iter().map(|&i| dec.values[i]).collect();
    let (phi, psi) = right_left_vectors(a, &lambdas, &dec.vectors, &order)?;
    let p = participation_matrix(&phi, &psi)?;
    let dominant = dominant_groups(&p, group_labels, threshold)?;
    Ok(ModalSolution {
        lambdas,
        phi,
        psi,
        p,
        dominant,
    })
}

/// Match `current` poles to `reference` slots. Returns `perm` with `perm[m]` the index in
/// `current` assigned to reference slot `m`.
///
/// Greedy nearest neighbour in the complex plane: the globally closest unassigned pair
/// is fixed first; distances within 1e-12 of each other are ordered by the current
/// pole's (real, imaginary) value, then by reference slot. Afterwards conjugate pairs
/// are oriented so each reference pair receives a conjugate pair with matching signs.
pub fn track_poles(reference: &[Complex64], current: &[Complex64]) -> Result<Vec<usize>> {
    if reference.len() != current.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: current.len(),
            context: "pole lists",
        });
    }
    let n = reference.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, r) in reference.iter().enumerate() {
        for (j, c) in current.iter().enumerate() {
            pairs.push(((r - c).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut perm = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut assigned = 0;
    let mut start = 0;
    while assigned < n {
        while start < pairs.len() && (perm[pairs[start].1] != usize::MAX || taken[pairs[start].2]) {
            start += 1;
        }
        let d0 = pairs[start].0;
        // among the near-tied candidates pick by current pole order, then reference slot
        let mut best = start;
        let mut k = start + 1;
        while k < pairs.len() && pairs[k].0 - d0 <= TIE_TOL {
            let (_, i, j) = pairs[k];
            if perm[i] == usize::MAX && !taken[j] {
                let (_, bi, bj) = pairs[best];
                let ord = pole_order(&current[j], &current[bj]).then(i.cmp(&bi));
                if ord == Ordering::Less {
                    best = k;
                }
            }
            k += 1;
        }
        let (_, i, j) = pairs[best];
        perm[i] = j;
        taken[j] = true;
        assigned += 1;
    }

    // orient conjugate pairs
    for i in 0..n {
        let ri = reference[i];
        if ri.im <= 0.0 {
            continue;
        }
        if let Some(k) = (0..n).find(|&k| k != i && reference[k] == ri.conj()) {
            let (ci, ck) = (current[perm[i]], current[perm[k]]);
            if ci.im < 0.0 && ck == ci.conj() {
                perm.swap(i, k);
            }
        }
    }
    debug_assert!(is_permutation(&perm));
    Ok(perm)
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&j| j < perm.len() && !std::mem::replace(&mut seen[j], true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_by_two_complex_pair() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -2.0]);
        let l = eigenvalues(&a).unwrap();
        assert!((l[0] - c(-1.0, -1.0)).norm() < 1e-14);
        assert!((l[1] - c(-1.0, 1.0)).norm() < 1e-14);
        let (phi, psi) = eigenvectors(&a, &l).unwrap();
        let ac = complexify(&a);
        for m in 0..2 {
            let v = phi.column(m).into_owned();
            assert!(residual(&ac, l[m], &v) <= 1e-10);
        }
        let eye = &psi * &phi;
        assert!((eye - DMatrix::<Complex64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn diagonal_matrix() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        let l = eigenvalues(&a).unwrap();
        assert_eq!(l, vec![c(-3.0, 0.0), c(-2.0, 0.0), c(-1.0, 0.0)]);
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let sol = modal_analysis(&a, &labels, DOMINANCE_THRESHOLD).unwrap();
        // sorted ascending, so mode 0 is state 2
        assert_eq!(sol.p[(2, 0)], 1.0);
        assert_eq!(sol.p.iter().filter(|&&v| v == 1.0).count(), 3);
        assert_eq!(sol.p.iter().filter(|&&v| v == 0.0).count(), 6);
        assert_eq!(sol.dominant[0], BTreeSet::from(["c".to_string()]));
    }

    #[test]
    fn symmetric_matrix_vectors_are_orthogonal() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 0.5, 0.1, 0.5, -3.0, 0.2, 0.1, 0.2, -1.0]);
        let l = eigenvalues(&a).unwrap();
        let (phi, psi) = eigenvectors(&a, &l).unwrap();
        let gram = phi.adjoint() * &phi;
        assert!((gram - DMatrix::<Complex64>::identity(3, 3)).norm() < 1e-12);
        assert!((psi - phi.transpose()).norm() < 1e-12);
    }

    #[test]
    fn participation_identity_and_column_sums() {
        let eye = DMatrix::<Complex64>::identity(3, 3);
        let p = participation_matrix(&eye, &eye).unwrap();
        assert_eq!(p, DMatrix::<f64>::identity(3, 3));

        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.3, -2.0, -0.5, 1.0, 0.4, -1.0, -2.0]);
        let l = eigenvalues(&a).unwrap();
        let (phi, psi) = eigenvectors(&a, &l).unwrap();
        let raw = raw_participation(&phi, &psi);
        for col in raw.column_iter() {
            let s: Complex64 = col.iter().sum();
            assert!((s - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn dominance_rules() {
        let p = DMatrix::from_column_slice(3, 1, &[1.0, 0.4, 0.1]);
        let labels: Vec<String> = ["SG mechanics", "VSC controllers", "SG exciter"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let d = dominant_groups(&p, &labels, 0.3).unwrap();
        assert_eq!(
            d[0],
            BTreeSet::from(["SG mechanics".to_string(), "VSC controllers".to_string()])
        );
        assert!(dominant_groups(&p, &labels, 1.0 + 1e-9).is_err());
        assert!(dominant_groups(&p, &labels, 0.0).is_err());
        assert_eq!(leading_group(&p, &labels), vec!["SG mechanics".to_string()]);
    }

    #[test]
    fn tracking_cases() {
        let r = vec![c(-3.0, 0.0), c(-1.0, -2.0), c(-1.0, 2.0)];
        assert_eq!(track_poles(&r, &r).unwrap(), vec![0, 1, 2]);
        let shifted: Vec<_> = r.iter().map(|z| z + c(0.01, 0.0)).collect();
        assert_eq!(track_poles(&r, &shifted).unwrap(), vec![0, 1, 2]);
        let reversed: Vec<_> = r.iter().rev().cloned().collect();
        assert_eq!(track_poles(&r, &reversed).unwrap(), vec![2, 1, 0]);
        assert!(track_poles(&r, &r[..2]).is_err());
    }

    #[test]
    fn non_square_is_rejected() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(eigenvalues(&a).is_err());
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(eigenvalues(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn one_by_one() {
        let a = DMatrix::from_element(1, 1, -4.0);
        assert_eq!(eigenvalues(&a).unwrap(), vec![c(-4.0, 0.0)]);
    }
}

//! Small dense and iterative kernels shared by the solvers.

use crate::error::{Error, Result};

/// Solve a tridiagonal system in place of `rhs`.
///
/// `lower[i]` couples unknown `i` to `i - 1` (`lower[0]` unused), `upper[i]`
/// couples `i` to `i + 1` (last entry unused).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    let mut d = diag[0];
    c[0] = upper[0] / d;
    rhs[0] /= d;
    for i in 1..n {
        d = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / d;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / d;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-10, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned conjugate gradients for a symmetric positive definite operator.
///
/// Stops when `|b - A x| <= tol * |b|`. `x` holds the initial guess on entry.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    precondition: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    for it in 0..opts.max_iter {
        if res <= opts.tol {
            return Ok(CgStats { iterations: it, residual: res });
        }
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let step = rz / pq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }
        res = norm(&r) / bnorm;
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let ratio = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + ratio * p[i];
        }
    }
    if res <= opts.tol {
        return Ok(CgStats { iterations: opts.max_iter, residual: res });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: res,
    })
}

/// Lower-triangular Cholesky factor that can grow by one row at a time.
///
/// Used when candidate index sets are built by appending one unknown at a time,
/// so each extension costs O(k^2) instead of a fresh O(k^3) factorization.
#[derive(Debug, Clone, Default)]
pub struct GrowingCholesky {
    rows: Vec<Vec<f64>>,
}

impl GrowingCholesky {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Solve `L w = b` by forward substitution.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut w = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s = b[i] - dot(&row[..i], &w[..i]);
            w.push(s / row[i]);
        }
        w
    }

    /// Append a row given the couplings to existing unknowns and the new diagonal.
    /// Returns the new row of `L`, or `None` if positive definiteness is lost.
    pub fn push(&mut self, coupling: &[f64], diag: f64) -> Option<&[f64]> {
        let mut row = self.forward(coupling);
        let d2 = diag - dot(&row, &row);
        if d2 <= 0.0 {
            return None;
        }
        row.push(d2.sqrt());
        self.rows.push(row);
        self.rows.last().map(|r| r.as_slice())
    }

    pub fn truncate(&mut self, len: usize) {
        self.rows.truncate(len);
    }
}

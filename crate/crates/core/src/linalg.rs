//! Small dense linear-algebra helpers shared by the solvers.
//!
//! Every system solved here is tiny (at most a few dozen unknowns), so the
//! helpers favour clarity and explicit conditioning checks over speed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Systems whose 2-norm condition number exceeds this are reported as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::INFINITY;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Condition number of a symmetric positive semidefinite matrix after
/// symmetric diagonal scaling to unit diagonal, so that basis columns on
/// very different scales are not mistaken for rank deficiency.
pub fn spd_condition(a: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = a.diagonal().iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { f64::NAN }).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    condition_number(&DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j]))
}

/// Solves `a x = b`, refusing ill-conditioned systems.
pub fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let condition = condition_number(a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem { context, condition });
    }
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularSystem { context, condition })
}

/// Like [`solve_checked`], but first rescales rows and columns to unit max-norm
/// so that blocks measured in different units do not inflate the condition number.
pub fn solve_equilibrated(a: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let n = a.nrows();
    let row_scale: Vec<f64> = (0..n)
        .map(|i| {
            let m = a.row(i).amax();
            if m > 0.0 { 1.0 / m } else { 1.0 }
        })
        .collect();
    let scaled_rows = DMatrix::from_fn(n, a.ncols(), |i, j| a[(i, j)] * row_scale[i]);
    let col_scale: Vec<f64> = (0..a.ncols())
        .map(|j| {
            let m = scaled_rows.column(j).amax();
            if m > 0.0 { 1.0 / m } else { 1.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, a.ncols(), |i, j| scaled_rows[(i, j)] * col_scale[j]);
    let rhs = DVector::from_fn(n, |i, _| b[i] * row_scale[i]);
    let y = solve_checked(&scaled, &rhs, context)?;
    Ok(DVector::from_fn(y.len(), |j, _| y[j] * col_scale[j]))
}

/// Solves a symmetric positive definite system by Cholesky, with an LU fallback
/// for matrices that are only semidefinite up to rounding.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    a.clone().lu().solve(b).filter(|x| x.iter().all(|v| v.is_finite()))
}

/// `Σ w_i r_i r_iᵀ` over the listed rows of `m`.
pub fn weighted_gram(m: &DMatrix<f64>, rows: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let k = m.ncols();
    let mut out = DMatrix::zeros(k, k);
    for (&i, &w) in rows.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..k {
            let wa = w * m[(i, a)];
            for b in a..k {
                out[(a, b)] += wa * m[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// `Σ w_i r_i` over the listed rows of `m`.
pub fn weighted_row_sum(m: &DMatrix<f64>, rows: &[usize], weights: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(m.ncols());
    for (&i, &w) in rows.iter().zip(weights) {
        for a in 0..m.ncols() {
            out[a] += w * m[(i, a)];
        }
    }
    out
}

/// Row `i` of `m` dotted with `v`.
#[inline]
pub fn row_dot(m: &DMatrix<f64>, i: usize, v: &DVector<f64>) -> f64 {
    (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Weighted least squares `argmin Σ w_i (y_i - m_iᵀβ)²` over the listed rows.
pub fn weighted_least_squares(m: &DMatrix<f64>, rows: &[usize], weights: &[f64], y: &[f64]) -> Option<DVector<f64>> {
    let gram = weighted_gram(m, rows, weights);
    let wy: Vec<f64> = weights.iter().zip(y).map(|(w, y)| w * y).collect();
    let rhs = weighted_row_sum(m, rows, &wy);
    if !(spd_condition(&gram) <= MAX_CONDITION) {
        return None;
    }
    solve_spd(&gram, &rhs)
}

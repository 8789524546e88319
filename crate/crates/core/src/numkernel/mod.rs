//! Dense linear-algebra and probability primitives.
//!
//! Everything here is a pure function of its inputs and works in `f64`.

mod matrix;
mod rng;

pub use matrix::{Mask, Matrix};
pub use rng::SeededRng;

use nalgebra::DMatrix;

use crate::error::{Result, ShdError};
use matrix::ensure_same_shape;

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_RELATIVE_THRESHOLD: f64 = 1e-10;

fn finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(ShdError::NonFinite { op })
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(ShdError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    finite("matmul", mm(a, b))
}

/// Unchecked-shape product for internal hot paths whose shapes are fixed by construction.
pub(crate) fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "mm: inner dimensions differ");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let bs = b.as_slice();
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bs[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`.
pub(crate) fn mm_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "mm_nt: inner dimensions differ");
    mm(a, &b.transpose())
}

/// `aᵀ · b`.
pub(crate) fn mm_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "mm_tn: inner dimensions differ");
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate().take(m) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-wise softmax of `logits / temperature`, restricted to unmasked entries.
///
/// Masked entries come out exactly zero. Each row is stabilized by subtracting
/// its maximum over unmasked entries before exponentiation.
pub fn softmax_rows(logits: &Matrix, mask: Option<&Mask>, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ShdError::invalid(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return Err(ShdError::Shape {
                op: "softmax_rows",
                left: logits.shape(),
                right: m.shape(),
            });
        }
    }
    let inv_t = 1.0 / temperature;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let allowed = |j: usize| mask.is_none_or(|m| m.allows(i, j));
        let row = logits.row(i);
        let max = (0..row.len())
            .filter(|&j| allowed(j))
            .map(|j| row[j] * inv_t)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(ShdError::FullyMaskedRow {
                op: "softmax_rows",
                row: i,
            });
        }
        let orow = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..row.len() {
            if allowed(j) {
                let e = (row[j] * inv_t - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    finite("softmax_rows", out)
}

/// `Σ aᵢⱼ bᵢⱼ`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    ensure_same_shape("frobenius_inner", a, b)?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum())
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values in non-increasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Moore–Penrose pseudo-inverse with singular values below
/// [`PINV_RELATIVE_THRESHOLD`] × σ_max treated as zero.
pub fn pseudo_inverse(m: &Matrix) -> Matrix {
    let svd = to_nalgebra(m).svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_THRESHOLD * sigma_max;
    let mut pinv = DMatrix::<f64>::zeros(m.cols(), m.rows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            pinv += (v_t.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    from_nalgebra(&pinv)
}

/// Minimum-norm least-squares solution `X` of `X · p = t`.
///
/// `p` is `k × c`, `t` is `r × c`; the result is `r × k`.
pub fn least_squares_rows(p: &Matrix, t: &Matrix) -> Result<Matrix> {
    if t.cols() != p.cols() {
        return Err(ShdError::Shape {
            op: "least_squares_rows",
            left: p.shape(),
            right: t.shape(),
        });
    }
    finite("least_squares_rows", mm(t, &pseudo_inverse(p)))
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
///
/// # Panics
/// If `v` is empty.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "simplex_project needs a non-empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

//! Slice-level numeric kernels shared by the autograd ops and the tests.
//!
//! Every reduction runs in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::math;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// In-place stabilized softmax of one row. `-inf` entries become exactly 0.
pub fn softmax_in_place(row: &mut [f64], row_index: usize) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::MaskedRow { row: row_index });
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            math::exp(*x - max)
        };
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// `log softmax` of one row written to `out`.
pub fn log_softmax_row(row: &[f64], out: &mut [f64], row_index: usize) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::MaskedRow { row: row_index });
    }
    let mut sum = 0.0;
    for &x in row {
        if x != f64::NEG_INFINITY {
            sum += math::exp(x - max);
        }
    }
    let lse = max + math::ln(sum);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

//! Small matrix-matrix kernels for batch-level training.
//!
//! All three products keep a 16-wide column block of the output in a local
//! accumulator array across the reduction loop, so the inner loop is pure
//! fused multiply-adds with no stores. Shapes here are tiny (hidden sizes in
//! the tens, batches in the tens), so there is no cache blocking — everything
//! involved fits in L1 comfortably.

use super::matrix::Matrix;
use crate::{Error, Result};

const BLOCK: usize = 16;

fn shape_err(what: &str, m: usize, k: usize, n: usize) -> Error {
    Error::Shape(format!("{what}: incompatible shapes (m={m}, k={k}, n={n})"))
}

/// One output block: `acc[j] += av * row[j]` for a compile-time width, so the
/// loop unrolls into vector fused multiply-adds. The dynamic-width fallback in
/// each kernel handles the final partial block.
#[inline(always)]
fn fma_block<const W: usize>(acc: &mut [f64; W], av: f64, row: &[f64]) {
    let row: &[f64; W] = row[..W].try_into().unwrap();
    for j in 0..W {
        acc[j] = av.mul_add(row[j], acc[j]);
    }
}

/// `out = act(a @ w^T + bias)`, where `a` is `m x k`, `w` is `n x k`
/// (row-major, one output unit per row) and `bias` has length `n`.
/// `relu` applies the rectifier to every output entry.
pub fn gemm_xwt_bias(a: &Matrix, w: &Matrix, bias: &[f64], relu: bool, out: &mut Matrix) -> Result<()> {
    let (m, k, n) = (a.rows(), a.cols(), w.rows());
    if w.cols() != k || bias.len() != n || out.rows() != m || out.cols() != n {
        return Err(shape_err("gemm_xwt_bias", m, k, n));
    }
    // transpose the weights once so the inner loop reads contiguous rows
    let mut wt = vec![0.0; k * n];
    for r in 0..n {
        let row = w.row(r);
        for c in 0..k {
            wt[c * n + r] = row[c];
        }
    }
    for r in 0..m {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        let mut c0 = 0;
        while c0 < n {
            let width = BLOCK.min(n - c0);
            let mut acc = [0.0f64; BLOCK];
            if width == BLOCK {
                for (kk, &av) in arow.iter().enumerate() {
                    fma_block(&mut acc, av, &wt[kk * n + c0..]);
                }
            } else {
                for (kk, &av) in arow.iter().enumerate() {
                    let wrow = &wt[kk * n + c0..kk * n + c0 + width];
                    for j in 0..width {
                        acc[j] = av.mul_add(wrow[j], acc[j]);
                    }
                }
            }
            for j in 0..width {
                let v = acc[j] + bias[c0 + j];
                orow[c0 + j] = if relu && !(v > 0.0) { 0.0 } else { v };
            }
            c0 += width;
        }
    }
    Ok(())
}

/// `out = a @ w`, where `a` is `m x k` and `w` is `k x n` row-major. This is
/// the backward data product: `k` indexes output units, `n` input units.
pub fn gemm_xw(a: &Matrix, w: &Matrix, out: &mut Matrix) -> Result<()> {
    let (m, k, n) = (a.rows(), a.cols(), w.cols());
    if w.rows() != k || out.rows() != m || out.cols() != n {
        return Err(shape_err("gemm_xw", m, k, n));
    }
    for r in 0..m {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        let mut c0 = 0;
        while c0 < n {
            let width = BLOCK.min(n - c0);
            let mut acc = [0.0f64; BLOCK];
            if width == BLOCK {
                for (kk, &av) in arow.iter().enumerate() {
                    fma_block(&mut acc, av, &w.row(kk)[c0..]);
                }
            } else {
                for (kk, &av) in arow.iter().enumerate() {
                    let wrow = &w.row(kk)[c0..c0 + width];
                    for j in 0..width {
                        acc[j] = av.mul_add(wrow[j], acc[j]);
                    }
                }
            }
            orow[c0..c0 + width].copy_from_slice(&acc[..width]);
            c0 += width;
        }
    }
    Ok(())
}

/// `out += scale * a^T @ x`, where `a` is `m x n_o` and `x` is `m x n_i`.
/// This is the weight-gradient product: row `o` of `out` accumulates the
/// batch sum of `a[:, o] * x` scaled by `scale`.
pub fn gemm_atx_acc(a: &Matrix, x: &Matrix, scale: f64, out: &mut Matrix) -> Result<()> {
    let (m, n_o, n_i) = (a.rows(), a.cols(), x.cols());
    if x.rows() != m || out.rows() != n_o || out.cols() != n_i {
        return Err(shape_err("gemm_atx_acc", m, n_o, n_i));
    }
    for o in 0..n_o {
        let orow = out.row_mut(o);
        let mut c0 = 0;
        while c0 < n_i {
            let width = BLOCK.min(n_i - c0);
            let mut acc = [0.0f64; BLOCK];
            if width == BLOCK {
                for b in 0..m {
                    fma_block(&mut acc, a.get(b, o), &x.row(b)[c0..]);
                }
            } else {
                for b in 0..m {
                    let av = a.get(b, o);
                    let xrow = &x.row(b)[c0..c0 + width];
                    for j in 0..width {
                        acc[j] = av.mul_add(xrow[j], acc[j]);
                    }
                }
            }
            for j in 0..width {
                orow[c0 + j] = scale.mul_add(acc[j], orow[c0 + j]);
            }
            c0 += width;
        }
    }
    Ok(())
}

/// `out += scale * column_sums(a)`: the bias-gradient companion of
/// [`gemm_atx_acc`].
pub fn col_sums_acc(a: &Matrix, scale: f64, out: &mut [f64]) -> Result<()> {
    if out.len() != a.cols() {
        return Err(shape_err("col_sums_acc", a.rows(), a.cols(), out.len()));
    }
    let mut sums = vec![0.0; a.cols()];
    for r in 0..a.rows() {
        for (s, v) in sums.iter_mut().zip(a.row(r)) {
            *s += v;
        }
    }
    for (o, s) in out.iter_mut().zip(&sums) {
        *o = scale.mul_add(*s, *o);
    }
    Ok(())
}

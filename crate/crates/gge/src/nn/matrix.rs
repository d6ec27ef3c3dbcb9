use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// One row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// One row as a mutable slice.
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// y = Wx
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    /// y = Wx into a caller-provided buffer; lets hot loops avoid allocating.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.cols || y.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec: matrix {}x{} with input length {} and output length {}",
                self.rows,
                self.cols,
                x.len(),
                y.len()
            )));
        }
        for r in 0..self.rows {
            y[r] = dot(self.row(r), x);
        }
        Ok(())
    }

    /// y = W^T x
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.cols];
        self.matvec_t_into(x, &mut y)?;
        Ok(y)
    }

    /// y = W^T x into a caller-provided buffer (overwritten, not accumulated).
    pub fn matvec_t_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.rows || y.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec_t: matrix {}x{} with input length {} and output length {}",
                self.rows,
                self.cols,
                x.len(),
                y.len()
            )));
        }
        y.fill(0.0);
        for r in 0..self.rows {
            let row = self.row(r);
            let xv = x[r];
            for (yc, w) in y.iter_mut().zip(row) {
                *yc = w.mul_add(xv, *yc);
            }
        }
        Ok(())
    }

    /// self += scale * outer(a, b), where outer(a, b)[r][c] = a[r]*b[c].
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let av = a[r] * scale;
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, bv) in row.iter_mut().zip(b) {
                *w = av.mul_add(*bv, *w);
            }
        }
    }
}

/// Dot product with four independent accumulators. The extra accumulators
/// break the serial add dependency so the loop is not latency-bound.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 = x[0].mul_add(y[0], s0);
        s1 = x[1].mul_add(y[1], s1);
        s2 = x[2].mul_add(y[2], s2);
        s3 = x[3].mul_add(y[3], s3);
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest = x.mul_add(*y, rest);
    }
    (s0 + s2) + (s1 + s3) + rest
}

/// y = Wx + b
pub fn linear_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(Error::Shape(format!(
            "linear: bias length {} vs {} output rows",
            b.len(),
            w.rows()
        )));
    }
    let mut y = w.matvec(x)?;
    for (yv, bv) in y.iter_mut().zip(b) {
        *yv += bv;
    }
    Ok(y)
}

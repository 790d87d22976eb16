//! Dense row-major matrix and the handful of kernels the models need.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Concatenates `other`'s columns to the right of `self`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row count");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += W x` for a row-major `W` of shape `(out.len(), x.len())`.
#[inline]
pub(crate) fn gemv_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(w.len(), out.len() * n);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ y` for a row-major `W` of shape `(y.len(), out.len())`.
#[inline]
pub(crate) fn gemv_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), y.len() * n);
    for (&yi, row) in y.iter().zip(w.chunks_exact(n)) {
        if yi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += yi * wv;
        }
    }
}

/// `G += y xᵀ` for a row-major `G` of shape `(y.len(), x.len())`.
#[inline]
pub(crate) fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    debug_assert_eq!(g.len(), y.len() * n);
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(n)) {
        if yi == 0.0 {
            continue;
        }
        for (gv, &xv) in row.iter_mut().zip(x) {
            *gv += yi * xv;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax, written into `out`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

//! Dense double-precision matrices and vectors plus the elementwise
//! nonlinearities used by the attention and matching networks.
//!
//! Storage is row-major and everything is `f64`; gradient checks at 1e-5
//! relative tolerance are not reachable in single precision. Values are
//! immutable from the caller's perspective once constructed, so all
//! operations here are plain functions that are safe to call concurrently.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor from nested row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument(
                    "ragged rows in matrix literal".to_string(),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vector {
        let mut v = Vector::zeros(self.rows);
        for r in 0..self.rows {
            v.set(r, self.get(r, c));
        }
        v
    }

    pub fn set_col(&mut self, c: usize, v: &Vector) {
        assert_eq!(v.len(), self.rows, "set_col length mismatch");
        for r in 0..self.rows {
            self.set(r, c, v.get(r));
        }
    }

    pub fn set_row(&mut self, r: usize, v: &Vector) {
        assert_eq!(v.len(), self.cols, "set_row length mismatch");
        self.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(v.data());
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&self) -> Matrix {
        self.map(|x| x.max(0.0))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "matrix add",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Matrix-vector product `self * v`.
    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matrix-vector product",
                self.shape_string(),
                format!("{}", v.len()),
            ));
        }
        let mut out = Vector::zeros(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.data()) {
                acc += a * b;
            }
            out.set(r, acc);
        }
        Ok(out)
    }

    /// `self^T * v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::shape(
                "transposed matrix-vector product",
                self.shape_string(),
                format!("{}", v.len()),
            ));
        }
        let mut out = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let s = v.get(r);
            for (c, a) in row.iter().enumerate() {
                out.data_mut()[c] += a * s;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Vector {
            data: data.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector {
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&self) -> Vector {
        self.map(|x| x.max(0.0))
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|x| x * s)
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "dot product",
                format!("{}", self.len()),
                format!("{}", other.len()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "vector add",
                format!("{}", self.len()),
                format!("{}", other.len()),
            ));
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "vector sub",
                format!("{}", self.len()),
                format!("{}", other.len()),
            ));
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Vector) {
        assert_eq!(self.len(), other.len(), "add_assign length mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix product. Errors if the inner dimensions disagree.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            a.shape_string(),
            b.shape_string(),
        ));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Elementwise hyperbolic tangent; outputs lie strictly inside (-1, 1).
pub fn tanh_map(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Numerically stable softmax: shifts by the max before exponentiating.
///
/// The input must be non-empty and finite.
pub fn softmax(z: &Vector) -> Vector {
    assert!(!z.is_empty(), "softmax of empty vector");
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// Outer product `a * b^T`.
pub fn outer(a: &Vector, b: &Vector) -> Matrix {
    let mut out = Matrix::zeros(a.len(), b.len());
    for r in 0..a.len() {
        let av = a.get(r);
        for c in 0..b.len() {
            out.set(r, c, av * b.get(c));
        }
    }
    out
}

/// Multiplies each column of `m` elementwise by `v`.
pub fn col_broadcast_mul(m: &Matrix, v: &Vector) -> Result<Matrix> {
    if m.rows() != v.len() {
        return Err(Error::shape(
            "col_broadcast_mul",
            m.shape_string(),
            format!("{}", v.len()),
        ));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let s = v.get(r);
        for c in 0..m.cols() {
            out.set(r, c, m.get(r, c) * s);
        }
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function, used as the testing
/// oracle for every analytic backward pass in this crate.
///
/// Errors if `eps` is not positive or `f` returns a non-finite value.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_grad eps must be positive, got {eps}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad evaluation at coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

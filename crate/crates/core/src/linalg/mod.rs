//! Dense linear algebra substrate: matrices, vectors, and the reverse-mode
//! gradient tape used by every trainable module.
//!
//! Values are 64-bit floats throughout. Public operations either return
//! finite results or an explicit [`Error`]; NaN and infinity never escape
//! silently.

pub mod tape;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len().to_string(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dims("Matrix::from_rows", format!("rows of length {c}"), "ragged rows"));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Deterministic initialization: uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> Vector {
        Vector::from(self.row(i).to_vec())
    }

    /// Validates the shape/finiteness invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix claims {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::validate"));
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                format!("rhs rows {}", other.rows),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matmul"));
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Adds `row` (a 1 x cols matrix) to every row of `self`.
    pub fn broadcast_add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::dims(
                "broadcast_add_row",
                format!("1x{}", self.cols),
                format!("{}x{}", row.rows, row.cols),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += row.data[j];
            }
        }
        Ok(out)
    }

    /// Stacks `other` below `self`.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims(
                "concat_rows",
                format!("{} cols", self.cols),
                format!("{} cols", other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Matrix> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            softmax_in_place(row)?;
        }
        Ok(out)
    }

    /// Vector of per-column means (1 x cols).
    pub fn mean_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        out.scale(1.0 / self.rows as f64)
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Vector::new"));
        }
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dims("dot", self.len().to_string(), other.len().to_string()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::dims("Vector::add", self.len().to_string(), other.len().to_string()));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::dims("Vector::sub", self.len().to_string(), other.len().to_string()));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Column-matrix view (len x 1).
    pub fn as_column(&self) -> Matrix {
        Matrix {
            rows: self.data.len(),
            cols: 1,
            data: self.data.clone(),
        }
    }

    /// Row-matrix view (1 x len).
    pub fn as_row(&self) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    /// Reads a single-column or single-row matrix back into a vector.
    pub fn from_matrix(m: &Matrix) -> Result<Vector> {
        if m.cols() != 1 && m.rows() != 1 {
            return Err(Error::dims(
                "Vector::from_matrix",
                "single row or column",
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        Ok(Vector {
            data: m.data().to_vec(),
        })
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    if !row.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Numerically stable softmax.
///
/// Output entries are positive and sum to 1 within 1e-12.
pub fn softmax(x: &Vector) -> Result<Vector> {
    let mut data = x.data.clone();
    softmax_in_place(&mut data)?;
    Ok(Vector { data })
}

/// Elementwise logistic function; `sigmoid(0) = 0.5` exactly.
pub fn sigmoid(x: &Vector) -> Result<Vector> {
    if !x.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sigmoid"));
    }
    Ok(Vector {
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    })
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Scaled dot-product attention `softmax(q kᵀ / sqrt(d_k)) v` with the
/// softmax applied per query row; `d_k` is the key width `q.cols`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::dims(
            "scaled_dot_attention",
            format!("key width {}", q.cols()),
            format!("{}", k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::dims(
            "scaled_dot_attention",
            format!("{} value rows", k.rows()),
            format!("{}", v.rows()),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = q.matmul(&k.transpose())?.scale(scale);
    scores.softmax_rows()?.matmul(v)
}

/// Cosine similarity `a.b / (|a||b|)`.
///
/// Errors with [`Error::ZeroVector`] when either norm is below 1e-12.
pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na < 1e-12 {
        return Err(Error::ZeroVector("cosine_sim lhs"));
    }
    if nb < 1e-12 {
        return Err(Error::ZeroVector("cosine_sim rhs"));
    }
    Ok(a.dot(b)? / (na * nb))
}

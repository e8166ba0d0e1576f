use std::fmt;

use crate::error::{shape_err, Result};

/// Dense row-major matrix of `f64`. Column vectors are `n x 1` matrices.
#[derive(Clone, PartialEq)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector of `f64`.
#[derive(Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Matrix2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Column vector holding `data`.
    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1 x 1` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return shape_err(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    /// Flattens row-major into a vector.
    pub fn flatten(&self) -> Vector {
        Vector::new(self.data.clone())
    }

    pub fn into_vector(self) -> Vector {
        Vector::new(self.data)
    }

    /// Matrix product with fixed row-major, left-to-right summation order.
    pub fn matmul(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(kernels::matmul(self, other))
    }

    pub fn transpose(&self) -> Matrix2 {
        Matrix2::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2 {
        Matrix2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix2, f: impl Fn(f64, f64) -> f64) -> Result<Matrix2> {
        if self.shape() != other.shape() {
            return shape_err(format!("elementwise {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(kernels::zip(self, other, f))
    }

    pub fn add(&self, other: &Matrix2) -> Result<Matrix2> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix2) -> Result<Matrix2> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix2) -> Result<Matrix2> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix2 {
        self.map(|x| x * c)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; infinite if shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix2) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl fmt::Debug for Matrix2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix2({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self { data: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn to_column(&self) -> Matrix2 {
        Matrix2::column(self.data.clone())
    }

    pub fn into_column(self) -> Matrix2 {
        Matrix2::column(self.data)
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return shape_err(format!("dot of lengths {} and {}", self.len(), other.len()));
        }
        Ok(kernels::dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.data)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Outer product: `result[i][j] = u[i] * v[j]`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix2 {
    kernels::outer(&u.data, &v.data)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix2) -> Matrix2 {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = &mut out.data[i * m.cols..(i + 1) * m.cols];
        kernels::softmax_in_place(row);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ELU with alpha = 1.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Raw kernels shared by the value backend and the tape, so that recording
/// and replay produce bit-identical results.
pub(crate) mod kernels {
    use super::Matrix2;

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    pub fn matmul(a: &Matrix2, b: &Matrix2) -> Matrix2 {
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.data[i * k + l] * b.data[l * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        Matrix2 { rows: n, cols: m, data: out }
    }

    /// `w x` where `x` is read as a flat vector of length `w.cols`.
    pub fn matvec(w: &Matrix2, x: &[f64]) -> Matrix2 {
        assert_eq!(w.cols, x.len(), "matvec: {}x{} by {}", w.rows, w.cols, x.len());
        let data = (0..w.rows).map(|i| dot(w.row(i), x)).collect();
        Matrix2::column(data)
    }

    /// `w^T x` where `x` has length `w.rows`.
    pub fn matvec_t(w: &Matrix2, x: &[f64]) -> Matrix2 {
        assert_eq!(w.rows, x.len(), "matvec_t: {}x{} by {}", w.rows, w.cols, x.len());
        let mut out = vec![0.0; w.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += wij * xi;
            }
        }
        Matrix2::column(out)
    }

    pub fn outer(u: &[f64], v: &[f64]) -> Matrix2 {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Matrix2 { rows: u.len(), cols: v.len(), data }
    }

    pub fn zip(a: &Matrix2, b: &Matrix2, f: impl Fn(f64, f64) -> f64) -> Matrix2 {
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        Matrix2 {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn map(a: &Matrix2, f: impl Fn(f64) -> f64) -> Matrix2 {
        a.map(f)
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }

    pub fn softmax(a: &Matrix2) -> Matrix2 {
        let mut out = a.clone();
        softmax_in_place(&mut out.data);
        out
    }

    pub fn log_softmax(a: &Matrix2) -> Matrix2 {
        let max = a.data.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for &x in &a.data {
            total += (x - max).exp();
        }
        let lse = max + total.ln();
        a.map(|x| x - lse)
    }

    /// Returns the normalized vector and `1 / sqrt(var + eps)`.
    pub fn layer_norm_parts(x: &[f64]) -> (Vec<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
    }

    pub fn layer_norm(x: &Matrix2, gain: &Matrix2, bias: &Matrix2) -> Matrix2 {
        assert_eq!(x.len(), gain.len(), "layer_norm gain length");
        assert_eq!(x.len(), bias.len(), "layer_norm bias length");
        let (xhat, _) = layer_norm_parts(&x.data);
        let data = xhat
            .iter()
            .zip(&gain.data)
            .zip(&bias.data)
            .map(|((h, g), b)| h * g + b)
            .collect();
        Matrix2 { rows: x.rows, cols: x.cols, data }
    }

    pub fn stack(parts: &[&Matrix2]) -> Matrix2 {
        let width = parts.first().map_or(0, |p| p.len());
        assert!(parts.iter().all(|p| p.len() == width), "stack: ragged parts");
        let mut data = Vec::with_capacity(width * parts.len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix2 { rows: parts.len(), cols: width, data }
    }

    pub fn concat(parts: &[&Matrix2]) -> Matrix2 {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix2::column(data)
    }

    pub fn slice(x: &Matrix2, offset: usize, rows: usize, cols: usize) -> Matrix2 {
        Matrix2 { rows, cols, data: x.data[offset..offset + rows * cols].to_vec() }
    }

    pub fn reshape(x: &Matrix2, rows: usize, cols: usize) -> Matrix2 {
        assert_eq!(x.len(), rows * cols, "reshape length");
        Matrix2 { rows, cols, data: x.data.clone() }
    }
}

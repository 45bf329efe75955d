//! Dense row-major matrices and 4-D activations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Row count above which products are split across rows.
const PAR_ROWS: usize = 32;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} entries"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Scales column `j` by `factors[j]`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.cols {
            return Err(Error::shape(
                "scale_columns",
                self.shape_str(),
                format!("{} factors", factors.len()),
            ));
        }
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            for (v, f) in r.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                self.shape_str(),
                format!("vector of length {}", v.len()),
            ));
        }
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            for (x, m) in r.iter_mut().zip(v) {
                *x += m;
            }
        }
        Ok(out)
    }

    /// Subtracts `v` from every row.
    pub fn sub_row_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "sub_row_vector",
                self.shape_str(),
                format!("vector of length {}", v.len()),
            ));
        }
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            for (x, m) in r.iter_mut().zip(v) {
                *x -= m;
            }
        }
        Ok(out)
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols.max(1)) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Stacks `self` above `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape("vstack", self.shape_str(), other.shape_str()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k, |i, j| self.get(i, j))
    }
}

/// Matrix product `a·b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, row: &mut [f64]| {
        let ar = &a.data[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        par::for_each_chunk_mut(&mut out.data, n, kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Ok(out)
}

/// `aᵀ·b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape_str(), b.shape_str()));
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out.data[i * n..(i + 1) * n];
            for (x, bv) in o.iter_mut().zip(br) {
                *x += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a·bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape_str(), b.shape_str()));
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, row: &mut [f64]| {
        let ar = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    };
    if m >= PAR_ROWS {
        par::for_each_chunk_mut(&mut out.data, n, kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Subtracts the column means. Returns `(centered, mean)`.
pub fn mean_center(a: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = a.column_means();
    let centered = a
        .sub_row_vector(&mean)
        .expect("mean has one entry per column");
    (centered, mean)
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute norm when `b` is zero.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm = b.frobenius_norm();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// Shape of a batch of feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Flattened feature width `c·h·w`.
    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.features()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A batch of `n` feature maps stored as `n×c×h×w`, channel-major per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    shape: FeatureShape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: FeatureShape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(
                "Tensor4::new",
                shape.to_string(),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: FeatureShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    #[inline]
    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Sample `i` as a flat `c·h·w` slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let p = self.shape.features();
        &self.data[i * p..(i + 1) * p]
    }

    /// Samples `idx` gathered into a new tensor.
    pub fn select(&self, idx: &[usize]) -> Self {
        let p = self.shape.features();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            shape: FeatureShape { n: idx.len(), ..self.shape },
            data,
        }
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let p = self.shape.features();
        Self {
            shape: FeatureShape { n: end - start, ..self.shape },
            data: self.data[start * p..end * p].to_vec(),
        }
    }

    /// Same data viewed as `n×p×1×1`.
    pub fn flattened(&self) -> Self {
        Self {
            shape: FeatureShape::new(self.shape.n, self.shape.features(), 1, 1),
            data: self.data.clone(),
        }
    }

    /// Reinterprets the data under `shape`; the element count must agree.
    pub fn reshaped(self, shape: FeatureShape) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

/// Linearises each sample channel-major into one row of an `n×p` matrix.
pub fn flatten_features(x: &Tensor4) -> Matrix {
    let s = x.shape();
    Matrix {
        rows: s.n,
        cols: s.features(),
        data: x.data.clone(),
    }
}

/// Inverse of [`flatten_features`].
pub fn unflatten_features(m: &Matrix, c: usize, h: usize, w: usize) -> Result<Tensor4> {
    let shape = FeatureShape::new(m.rows(), c, h, w);
    if shape.features() != m.cols() {
        return Err(Error::shape(
            "unflatten_features",
            m.shape_str(),
            format!("{c}x{h}x{w}"),
        ));
    }
    Tensor4::new(shape, m.data.clone())
}

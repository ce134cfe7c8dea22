//! Dense linear algebra used by the curvature and attribution engines.
//!
//! Everything here is small, row-major and `f64`. The symmetric eigensolver
//! is the workhorse: every matrix function applied to a Hessian estimate
//! goes through [`sym_eig`].

mod eigen;
mod kron;

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdaError};

pub use eigen::{matrix_fn, sym_eig, EigenPair, EIG_CLAMP};
pub use kron::{kron, KRON_LIMIT};

/// Absolute symmetry tolerance, scaled by `max(1, max|m_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TdaError::Dimension {
                context: "Mat::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(TdaError::Dimension {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "t_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            axpy(vi, self.row(i), &mut out);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TdaError::Dimension {
                context: "elementwise",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Adds `w · u vᵀ` in place.
    pub fn add_outer(&mut self, w: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let a = w * ui;
            if a == 0.0 {
                continue;
            }
            axpy(a, v, self.row_mut(i));
        }
    }

    /// Adds `w · u uᵀ` to the upper triangle only; call [`Mat::mirror_upper`] afterwards.
    pub fn add_outer_upper(&mut self, w: f64, u: &[f64]) {
        let n = self.rows;
        assert_eq!(u.len(), n);
        for i in 0..n {
            let a = w * u[i];
            if a == 0.0 {
                continue;
            }
            let row = &mut self.data[i * n + i..(i + 1) * n];
            for (o, &uj) in row.iter_mut().zip(&u[i..]) {
                *o += a * uj;
            }
        }
    }

    pub fn mirror_upper(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                self.data[i * n + j] = self.data[j * n + i];
            }
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A dense matrix known to be symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    /// Validates symmetry within [`SYMMETRY_TOL`] and exactly symmetrizes.
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(TdaError::Dimension {
                context: "SymMatrix::new",
                expected: m.rows(),
                got: m.cols(),
            });
        }
        if m.rows() == 0 {
            return Err(TdaError::invalid("SymMatrix must have dim >= 1"));
        }
        let n = m.rows();
        let tol = SYMMETRY_TOL * m.max_abs().max(1.0);
        let mut m = m;
        for i in 0..n {
            for j in 0..i {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > tol || !gap.is_finite() {
                    return Err(TdaError::NotSymmetric {
                        row: i,
                        col: j,
                        gap,
                    });
                }
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Mat::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Mat::zeros(n, n))
    }

    pub fn from_diag(d: &[f64]) -> Self {
        Self(Mat::from_diag(d))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.0.matvec(v)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn add_diag(&self, lambda: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.rows() {
            m[(i, i)] += lambda;
        }
        Self(m)
    }

    /// Arithmetic mean of a non-empty list of equally sized matrices.
    pub fn mean(items: &[SymMatrix]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TdaError::invalid("mean of zero matrices"))?;
        let mut acc = first.0.clone();
        for m in &items[1..] {
            acc = acc.add(&m.0)?;
        }
        Ok(Self(acc.scale(1.0 / items.len() as f64)))
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scaled(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

/// Elementwise mean of equally sized vectors.
pub fn mean_vec(items: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = items.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for v in items {
        axpy(1.0, v, &mut acc);
    }
    let inv = 1.0 / items.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    acc
}

/// Relative Frobenius distance `|a - b| / max(|b|, tiny)`.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    let diff = a.sub(b).map(|d| d.frobenius()).unwrap_or(f64::INFINITY);
    diff / b.frobenius().max(f64::MIN_POSITIVE)
}

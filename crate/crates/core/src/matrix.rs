//! Dense row-major `f64` matrix.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};

/// Dense real matrix stored row-major.
///
/// Constructors reject non-finite entries. Shapes with a zero dimension are
/// representable (an empty Kronecker sum, a rank-0 factor) but cannot be
/// written to disk.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| dim_err!("{rows}x{cols} overflows usize"))?;
        if data.len() != len {
            return Err(dim_err!(
                "{rows}x{cols} matrix needs {len} entries, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(arg_err!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Copy of a row-major block, skipping the finiteness scan. Used on
    /// intermediate products that may legitimately overflow mid-training.
    pub(crate) fn block_of(rows: usize, cols: usize, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: data.to_vec(),
        }
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(
            r,
            c,
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Column vector holding `values`.
    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    /// Build from a closure over `(row, col)`. Used where finiteness is
    /// guaranteed by construction.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        let mut madds = 0;
        self.matmul_counted(rhs, &mut madds)
    }

    /// Matrix product that adds the number of scalar multiply-adds it
    /// performed to `madds`.
    pub fn matmul_counted(&self, rhs: &Matrix, madds: &mut u64) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(dim_err!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        if n > 0 {
            for (out_row, lhs_row) in out
                .data
                .chunks_exact_mut(n)
                .zip(self.data.chunks_exact(self.cols.max(1)))
            {
                accumulate_rows(out_row, &lhs_row[..self.cols], &rhs.data);
            }
        }
        *madds += (self.rows * self.cols * n) as u64;
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(dim_err!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        let n = rhs.cols;
        if n > 0 {
            let mut coeffs = vec![0.0; self.rows];
            for (i, out_row) in out.data.chunks_exact_mut(n).enumerate() {
                for (k, c) in coeffs.iter_mut().enumerate() {
                    *c = self.data[k * self.cols + i];
                }
                accumulate_rows(out_row, &coeffs, &rhs.data);
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(dim_err!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * rhs`
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius inner product `⟨self, rhs⟩`.
    pub fn frobenius_dot(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(dot(&self.data, &rhs.data))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `‖self − rhs‖_F / ‖rhs‖_F`, falling back to the absolute error when
    /// `rhs` is zero.
    pub fn rel_frobenius_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let denom = reference.frobenius_norm();
        Ok(if denom > 0.0 { diff / denom } else { diff })
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(dim_err!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        Ok(())
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// `out += Σ_k coeffs[k] · rhs_row(k)` where `rhs` holds `coeffs.len()`
/// rows of width `out.len()`. Four rows are folded per pass over `out`.
fn accumulate_rows(out: &mut [f64], coeffs: &[f64], rhs: &[f64]) {
    let n = out.len();
    let mut quads = coeffs.chunks_exact(4);
    let mut k = 0;
    for a in quads.by_ref() {
        let rows = &rhs[k * n..(k + 4) * n];
        let (r0, rest) = rows.split_at(n);
        let (r1, rest) = rest.split_at(n);
        let (r2, r3) = rest.split_at(n);
        for ((((o, &b0), &b1), &b2), &b3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            *o += a[0] * b0 + a[1] * b1 + a[2] * b2 + a[3] * b3;
        }
        k += 4;
    }
    for &a in quads.remainder() {
        for (o, &b) in out.iter_mut().zip(&rhs[k * n..(k + 1) * n]) {
            *o += a * b;
        }
        k += 1;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut acc = [0.0; 4];
    let (qa, qb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (qa.remainder(), qb.remainder());
    for (x, y) in qa.zip(qb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

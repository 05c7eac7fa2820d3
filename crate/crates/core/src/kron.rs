//! Kronecker products, column-major vectorization and the block
//! rearrangement that turns nearest-Kronecker approximation into an SVD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::matrix::Matrix;

/// Factor dimensions: `U` is `m×n`, `V` is `p×q`, and `U ⊗ V` is
/// `(m·p)×(n·q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KronShape {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
}

impl KronShape {
    pub fn new(m: usize, n: usize, p: usize, q: usize) -> Result<Self> {
        for (name, v) in [("m", m), ("n", n), ("p", p), ("q", q)] {
            if v == 0 {
                return Err(arg_err!("factor dimension {name} must be positive"));
            }
        }
        m.checked_mul(p)
            .and(n.checked_mul(q))
            .and(m.checked_mul(n))
            .and(p.checked_mul(q))
            .ok_or_else(|| dim_err!("factor dimensions {m},{n},{p},{q} overflow"))?;
        Ok(Self { m, n, p, q })
    }

    /// Balanced factorization of a `rows×cols` weight: `m` is the largest
    /// divisor of `rows` not exceeding `√rows` and `p = rows / m`; `n`, `q`
    /// likewise from `cols`.
    pub fn auto(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(arg_err!("cannot factor a {rows}x{cols} weight"));
        }
        let m = balanced_divisor(rows);
        let n = balanced_divisor(cols);
        Self::new(m, n, rows / m, cols / n)
    }

    pub fn rows(&self) -> usize {
        self.m * self.p
    }

    pub fn cols(&self) -> usize {
        self.n * self.q
    }

    /// Size of `vec(U)`, the row count of the rearranged matrix.
    pub fn left_len(&self) -> usize {
        self.m * self.n
    }

    /// Size of `vec(V)`, the column count of the rearranged matrix.
    pub fn right_len(&self) -> usize {
        self.p * self.q
    }

    /// Maximum number of Kronecker terms (rank of the rearranged matrix).
    pub fn max_rank(&self) -> usize {
        self.left_len().min(self.right_len())
    }

    /// Check that a `rows×cols` weight is compatible, naming the first
    /// offending dimension.
    pub fn check_weight(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows() != rows {
            return Err(dim_err!(
                "m*p = {}*{} = {} does not match weight rows {rows}",
                self.m,
                self.p,
                self.rows()
            ));
        }
        if self.cols() != cols {
            return Err(dim_err!(
                "n*q = {}*{} = {} does not match weight cols {cols}",
                self.n,
                self.q,
                self.cols()
            ));
        }
        Ok(())
    }
}

fn balanced_divisor(k: usize) -> usize {
    (1..=k)
        .take_while(|d| d * d <= k)
        .filter(|d| k.is_multiple_of(*d))
        .last()
        .unwrap_or(1)
}

impl fmt::Display for KronShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.m, self.n, self.p, self.q)
    }
}

impl FromStr for KronShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(arg_err!("shape must be m,n,p,q; got {s:?}"));
        }
        let mut dims = [0usize; 4];
        for (slot, (name, part)) in dims.iter_mut().zip(["m", "n", "p", "q"].iter().zip(&parts)) {
            *slot = part.parse().map_err(|_| {
                arg_err!("shape dimension {name} is not a positive integer: {part:?}")
            })?;
        }
        Self::new(dims[0], dims[1], dims[2], dims[3])
    }
}

/// Kronecker product `A ⊗ B`: block `(i, j)` is `a_ij · B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a
        .rows()
        .checked_mul(b.rows())
        .ok_or_else(|| dim_err!("kron row count overflows"))?;
    let cols = a
        .cols()
        .checked_mul(b.cols())
        .ok_or_else(|| dim_err!("kron column count overflows"))?;
    rows.checked_mul(cols)
        .ok_or_else(|| dim_err!("kron result {rows}x{cols} overflows"))?;
    let (p, q) = b.shape();
    Ok(Matrix::from_fn(rows, cols, |r, c| {
        a[(r / p, c / q)] * b[(r % p, c % q)]
    }))
}

/// Column-major vectorization: `X[i][j]` lands at `i + j·rows`.
pub fn vec(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.len(), 1, |k, _| x[(k % x.rows(), k / x.rows())])
}

#[cfg(test)]
pub(crate) fn vec_to_vec(x: &Matrix) -> Vec<f64> {
    (0..x.len())
        .map(|k| x[(k % x.rows(), k / x.rows())])
        .collect()
}

/// Inverse of [`vec`]. Accepts any single-row or single-column matrix.
pub fn unvec(x: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if x.rows() != 1 && x.cols() != 1 {
        return Err(dim_err!(
            "unvec expects a vector, got {}x{}",
            x.rows(),
            x.cols()
        ));
    }
    unvec_slice(x.as_slice(), rows, cols)
}

pub(crate) fn unvec_slice(x: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if rows.checked_mul(cols) != Some(x.len()) {
        return Err(dim_err!(
            "cannot reshape length {} into {rows}x{cols}",
            x.len()
        ));
    }
    Ok(Matrix::from_fn(rows, cols, |i, j| x[i + j * rows]))
}

/// Block rearrangement `R(W)`: the `p×q` block at block position `(i, j)`
/// becomes row `i + j·m` holding `vec(W_ij)ᵀ`, so `R(A ⊗ B) = vec(A)·vec(B)ᵀ`.
pub fn rearrange(w: &Matrix, shape: KronShape) -> Result<Matrix> {
    shape.check_weight(w.rows(), w.cols())?;
    let KronShape { m, p, q, .. } = shape;
    Ok(Matrix::from_fn(
        shape.left_len(),
        shape.right_len(),
        |row, col| {
            let (i, j) = (row % m, row / m);
            let (a, b) = (col % p, col / p);
            w[(i * p + a, j * q + b)]
        },
    ))
}

/// Inverse of [`rearrange`].
pub fn unrearrange(r: &Matrix, shape: KronShape) -> Result<Matrix> {
    if r.shape() != (shape.left_len(), shape.right_len()) {
        return Err(dim_err!(
            "rearranged matrix is {}x{}, expected {}x{}",
            r.rows(),
            r.cols(),
            shape.left_len(),
            shape.right_len()
        ));
    }
    let KronShape { m, p, q, .. } = shape;
    Ok(Matrix::from_fn(shape.rows(), shape.cols(), |row, col| {
        let (i, a) = (row / p, row % p);
        let (j, b) = (col / q, col % q);
        r[(i + j * m, a + b * p)]
    }))
}

//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Accurate to working precision on the desk-scale matrices this crate
//! handles (up to a few hundred rows or columns). The result is fully
//! deterministic: rotations are applied in a fixed cyclic order and signs are
//! normalized afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::matrix::{dot, Matrix};

const MAX_SWEEPS: usize = 100;

/// Thin SVD `M = U · diag(S) · Vt` with `k = min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// `rows×k`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `k×cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    /// `U_r · diag(S_r) · Vt_r` for the leading `r` components.
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        Matrix::from_fn(self.u.rows(), self.vt.cols(), |i, j| {
            (0..r)
                .map(|k| self.u[(i, k)] * self.s[k] * self.vt[(k, j)])
                .sum()
        })
    }
}

/// Thin singular value decomposition.
///
/// Sign convention: in every left singular vector the first entry of largest
/// magnitude is nonnegative; the matching right vector is flipped with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(arg_err!("svd of an empty {}x{} matrix", m.rows(), m.cols()));
    }
    let (u_cols, s, v_cols) = if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        (u, s, v)
    } else {
        // Mᵀ = U' S V'ᵀ  =>  M = V' S U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&m.transpose())?;
        (v_t, s, u_t)
    };

    let k = s.len();
    let mut u_cols = u_cols;
    let mut v_cols = v_cols;
    for j in 0..k {
        let col = &u_cols[j];
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u_cols[j].iter_mut().for_each(|x| *x = -*x);
            v_cols[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_fn(m.rows(), k, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(k, m.cols(), |i, j| v_cols[i][j]);
    Ok(SvdResult { u, s, vt })
}

type Columns = Vec<Vec<f64>>;

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns left vectors,
/// singular values and right vectors, all sorted by decreasing value, left
/// vectors completed to an orthonormal set where singular values vanish.
fn jacobi_tall(m: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    let mut a: Columns = (0..cols).map(|j| m.col_to_vec(j)).collect();
    let mut v: Columns = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * rows as f64;
    let mut converged = cols < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical {
                message: format!("one-sided Jacobi SVD did not converge on {rows}x{cols} input"),
                iterations: sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..cols - 1 {
            for j in i + 1..cols {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                if alpha < f64::MIN_POSITIVE || beta < f64::MIN_POSITIVE {
                    continue;
                }
                let gamma = dot(&a[i], &a[j]);
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut u_out: Columns = Vec::with_capacity(cols);
    let mut s_out = Vec::with_capacity(cols);
    let mut v_out: Columns = Vec::with_capacity(cols);
    let mut null_slots = Vec::new();
    for &k in &order {
        let sigma = norms[k];
        if sigma * sigma >= f64::MIN_POSITIVE {
            u_out.push(a[k].iter().map(|x| x / sigma).collect());
        } else {
            null_slots.push(u_out.len());
            u_out.push(Vec::new());
        }
        s_out.push(sigma);
        v_out.push(v[k].clone());
    }
    for slot in null_slots {
        let basis: Vec<&Vec<f64>> = u_out.iter().filter(|c| !c.is_empty()).collect();
        let completed = complete_basis(&basis, rows);
        u_out[slot] = completed;
    }
    Ok((u_out, s_out, v_out))
}

fn rotate(cols: &mut Columns, i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Unit vector orthogonal to `basis`: the canonical basis vector with the
/// largest residual after projection (first on ties), re-orthogonalized.
fn complete_basis(basis: &[&Vec<f64>], n: usize) -> Vec<f64> {
    let project_out = |mut e: Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let proj = dot(b, &e);
                for (x, y) in e.iter_mut().zip(b.iter()) {
                    *x -= proj * y;
                }
            }
        }
        e
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for idx in 0..n {
        let mut e = vec![0.0; n];
        e[idx] = 1.0;
        let r = project_out(e);
        let norm = dot(&r, &r).sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, r));
        }
    }
    let (norm, mut r) = best.expect("completion needs n >= 1");
    r.iter_mut().for_each(|x| *x /= norm);
    r
}

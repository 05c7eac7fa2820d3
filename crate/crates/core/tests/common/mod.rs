//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the library's own linear algebra: singular values
//! come from nalgebra, Kronecker products and rearrangements are spelled out
//! entry by entry from their definitions.

#![allow(dead_code)]

use kronadapt::rng::{gaussian_matrix, seeded};
use kronadapt::toybench::loss_and_gradient;
use kronadapt::{Adapter, KronShape, Matrix};
use nalgebra::DMatrix;

pub fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(rows, cols, &mut seeded(seed))
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `A ⊗ B` straight from the block definition.
pub fn dense_kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = (b.rows(), b.cols());
    Matrix::from_fn(a.rows() * p, a.cols() * q, |r, c| {
        a[(r / p, c / q)] * b[(r % p, c % q)]
    })
}

/// Rearrangement oracle: row `i + j·m` is the column-major vec of block
/// `(i, j)`.
pub fn dense_rearrange(w: &Matrix, s: KronShape) -> Matrix {
    Matrix::from_fn(s.m * s.n, s.p * s.q, |row, col| {
        let (i, j) = (row % s.m, row / s.m);
        let (k, l) = (col % s.p, col / s.p);
        w[(i * s.p + k, j * s.q + l)]
    })
}

/// `count` mutually orthogonal `rows×cols` matrices of unit Frobenius norm.
pub fn orthonormal_matrices(count: usize, rows: usize, cols: usize, seed: u64) -> Vec<Matrix> {
    let g = to_na(&random(rows * cols, count, seed));
    let q = g.qr().q();
    (0..count)
        .map(|k| Matrix::from_fn(rows, cols, |i, j| q[(i * cols + j, k)]))
        .collect()
}

pub fn frob(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Worst entrywise relative error between the analytic MSE gradient and
/// central differences with step `h`. Entries are compared relative to
/// `max(|analytic|, |numeric|, 1e-6·max|analytic|)` so that exact zeros do
/// not divide by zero.
pub fn finite_difference_error(adapter: &Adapter, x: &Matrix, t: &Matrix, h: f64) -> f64 {
    let (_, analytic) = loss_and_gradient(adapter, x, t).unwrap();
    let params = adapter.flat_params();
    assert_eq!(analytic.len(), params.len());
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let loss_at = |theta: &[f64]| {
        let mut a = adapter.clone();
        a.set_flat_params(theta).unwrap();
        let r = a.forward(x).unwrap().sub(t).unwrap();
        r.as_slice().iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    };
    let mut worst = 0.0f64;
    let mut theta = params.clone();
    for i in 0..params.len() {
        theta[i] = params[i] + h;
        let up = loss_at(&theta);
        theta[i] = params[i] - h;
        let down = loss_at(&theta);
        theta[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6 * scale);
        if denom > 0.0 {
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

/// Push every parameter off its initial value so no gradient block is
/// identically zero (LoRA's `B = 0` start would otherwise zero `∂A`).
pub fn perturbed(adapter: &Adapter, seed: u64, size: f64) -> Adapter {
    let mut a = adapter.clone();
    let p = a.flat_params();
    let noise = random(p.len(), 1, seed);
    let moved: Vec<f64> = p
        .iter()
        .zip(noise.as_slice())
        .map(|(v, n)| v + size * n)
        .collect();
    a.set_flat_params(&moved).unwrap();
    a
}

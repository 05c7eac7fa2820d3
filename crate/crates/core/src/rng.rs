//! Seeded random matrices. ChaCha8 keeps streams identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Entries uniform on `[-bound, bound)`.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Gaussian matrix rescaled to unit Frobenius norm.
pub fn unit_gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let g = gaussian_matrix(rows, cols, rng);
    let norm = g.frobenius_norm();
    g.scale(1.0 / norm)
}

/// `k` orthonormal columns of length `n` (modified Gram-Schmidt on Gaussian
/// draws, re-orthogonalized once).
pub fn orthonormal_columns(n: usize, k: usize, rng: &mut SeededRng) -> Matrix {
    assert!(
        k <= n,
        "cannot draw {k} orthonormal vectors in dimension {n}"
    );
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let proj: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

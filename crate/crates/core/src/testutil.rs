use crate::matrix::Matrix;
use crate::rng::{gaussian_matrix, seeded};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(rows, cols, &mut seeded(seed))
}

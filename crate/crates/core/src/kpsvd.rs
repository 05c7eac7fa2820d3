//! Kronecker-product SVD: the optimal sum-of-Kronecker-products
//! approximation of a weight, read off the SVD of its block rearrangement.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::kron::{rearrange, unvec_slice, KronShape};
use crate::matrix::Matrix;
use crate::svd::svd;

/// One weighted Kronecker term `sigma · (U ⊗ V)`.
///
/// Straight out of [`kpsvd`] the factors have unit Frobenius norm and
/// `sigma >= 0`; once trained, neither is enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronTerm {
    pub sigma: f64,
    /// `m×n`
    pub u: Matrix,
    /// `p×q`
    pub v: Matrix,
}

impl KronTerm {
    pub fn new(sigma: f64, u: Matrix, v: Matrix) -> Result<Self> {
        if !sigma.is_finite() {
            return Err(arg_err!("term weight must be finite, got {sigma}"));
        }
        Ok(Self { sigma, u, v })
    }

    pub fn shape(&self) -> KronShape {
        KronShape {
            m: self.u.rows(),
            n: self.u.cols(),
            p: self.v.rows(),
            q: self.v.cols(),
        }
    }

    /// Number of trainable scalars: `mn + pq + 1`.
    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpsvdResult {
    /// Retained terms, `sigma` nonincreasing.
    pub terms: Vec<KronTerm>,
    pub shape: KronShape,
    /// All singular values of the rearranged weight, not just the kept ones.
    pub spectrum: Vec<f64>,
    /// `‖W − Σ sigma_k U_k ⊗ V_k‖_F` over the retained terms.
    pub residual_fro: f64,
}

impl KpsvdResult {
    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Keep the leading `r` terms (`r = 0` allowed) and recompute the
    /// residual against `w`.
    pub fn truncate(&self, w: &Matrix, r: usize) -> Result<KpsvdResult> {
        if r > self.terms.len() {
            return Err(arg_err!(
                "cannot keep {r} terms out of {}",
                self.terms.len()
            ));
        }
        let mut out = KpsvdResult {
            terms: self.terms[..r].to_vec(),
            shape: self.shape,
            spectrum: self.spectrum.clone(),
            residual_fro: 0.0,
        };
        out.residual_fro = approximation_error(w, &out)?;
        Ok(out)
    }

    /// `Σ_{k ≥ rank} spectrum[k]²`, the optimal squared error at this rank.
    pub fn tail_energy(&self) -> f64 {
        self.spectrum[self.terms.len().min(self.spectrum.len())..]
            .iter()
            .map(|s| s * s)
            .sum()
    }
}

/// Leading `r` Kronecker terms of `w`.
pub fn kpsvd(w: &Matrix, shape: KronShape, r: usize) -> Result<KpsvdResult> {
    shape.check_weight(w.rows(), w.cols())?;
    let max = shape.max_rank();
    if r == 0 || r > max {
        return Err(arg_err!("rank {r} outside 1..={max} for shape {shape}"));
    }
    decompose(w, shape, r)
}

/// All `min(mn, pq)` Kronecker terms of `w`.
pub fn kpsvd_full(w: &Matrix, shape: KronShape) -> Result<KpsvdResult> {
    shape.check_weight(w.rows(), w.cols())?;
    decompose(w, shape, shape.max_rank())
}

fn decompose(w: &Matrix, shape: KronShape, r: usize) -> Result<KpsvdResult> {
    let rearranged = rearrange(w, shape)?;
    let dec = svd(&rearranged)?;
    let mut terms = Vec::with_capacity(r);
    for k in 0..r {
        let left = dec.u.col_to_vec(k);
        let u = unvec_slice(&left, shape.m, shape.n)?;
        let v = unvec_slice(dec.vt.row(k), shape.p, shape.q)?;
        terms.push(KronTerm::new(dec.s[k], u, v)?);
    }
    let mut out = KpsvdResult {
        terms,
        shape,
        spectrum: dec.s,
        residual_fro: 0.0,
    };
    out.residual_fro = approximation_error(w, &out)?;
    Ok(out)
}

/// Dense `Σ sigma_k · (U_k ⊗ V_k)`; the zero matrix when there are no terms.
pub fn reconstruct(result: &KpsvdResult) -> Matrix {
    reconstruct_terms(&result.terms, result.shape)
}

pub(crate) fn reconstruct_terms(terms: &[KronTerm], shape: KronShape) -> Matrix {
    let KronShape { m, n, p, q } = shape;
    let mut out = Matrix::zeros(shape.rows(), shape.cols());
    for term in terms {
        for i in 0..m {
            for j in 0..n {
                let a = term.sigma * term.u[(i, j)];
                if a == 0.0 {
                    continue;
                }
                for r in 0..p {
                    for c in 0..q {
                        out[(i * p + r, j * q + c)] += a * term.v[(r, c)];
                    }
                }
            }
        }
    }
    out
}

/// `‖W − reconstruct(result)‖_F`.
pub fn approximation_error(w: &Matrix, result: &KpsvdResult) -> Result<f64> {
    if w.shape() != (result.shape.rows(), result.shape.cols()) {
        return Err(dim_err!(
            "weight is {}x{} but decomposition is for {}x{}",
            w.rows(),
            w.cols(),
            result.shape.rows(),
            result.shape.cols()
        ));
    }
    Ok(w.sub(&reconstruct(result))?.frobenius_norm())
}

//! Kronecker-product SVD adapters for parameter-efficient fine-tuning.
//!
//! A weight `W` of shape `(m·p)×(n·q)` is approximated by a weighted sum of
//! Kronecker products `Σ σ_k U_k ⊗ V_k` obtained from the SVD of a block
//! rearrangement of `W`. The number of retained terms is picked from the
//! rearranged spectrum by an energy threshold and an elbow criterion. The
//! resulting adapter trains `σ_k`, `U_k` and `V_k` against the frozen
//! residual. LoRA and PiSSA adapters are provided as baselines, along with a
//! deterministic teacher-student harness for comparing their training
//! dynamics.

pub mod adapter;
pub mod error;
pub mod io;
pub mod kpsvd;
pub mod kron;
pub mod matrix;
pub mod rank;
pub mod report;
pub mod rng;
pub mod svd;
pub mod toybench;

#[cfg(test)]
pub(crate) mod testutil;

pub use adapter::{
    kron_matvec, kron_matvec_counted, Adapter, AdapterKind, CostReport, FullAdapter, Gradients,
    LoraAdapter, PissaAdapter, SokaAdapter,
};
pub use error::{Error, ErrorCategory, Result};
pub use kpsvd::{approximation_error, kpsvd, kpsvd_full, reconstruct, KpsvdResult, KronTerm};
pub use kron::{kron, rearrange, unrearrange, unvec, vec, KronShape};
pub use matrix::Matrix;
pub use rank::{elbow_rank, energy_rank, select_rank, RankDecision, RankPolicy, SelectionMode};
pub use svd::{svd, SvdResult};

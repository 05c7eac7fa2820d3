//! Trainable weight-update adapters.
//!
//! Every adapter maps a batch of input columns `X` to `W_eff · X` where
//! `W_eff` is a frozen base plus a trainable update:
//!
//! * [`SokaAdapter`]: `base + Σ σ_k U_k ⊗ V_k`, initialized by KPSVD with the
//!   frozen base holding the residual. The update is never materialized on
//!   the forward path; each term is applied as two small GEMMs.
//! * [`LoraAdapter`]: `base + s·A·Bᵀ` with random `A` and zero `B`.
//! * [`PissaAdapter`]: `base + A·Bᵀ` with `A`, `B` from the top singular
//!   triplets of the weight and the frozen base holding the residual.
//! * [`FullAdapter`]: the whole weight is trainable.
//!
//! Gradients are hand-derived and checked against central finite
//! differences in the test suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::kpsvd::{kpsvd_full, reconstruct_terms, KronTerm};
use crate::kron::{unvec_slice, KronShape};
use crate::matrix::Matrix;
use crate::rank::{manual_rank, select_rank, RankDecision, RankPolicy};
use crate::rng::{seeded, uniform_matrix};
use crate::svd::svd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Soka,
    Lora,
    Pissa,
    Full,
}

impl AdapterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::Soka => "soka",
            AdapterKind::Lora => "lora",
            AdapterKind::Pissa => "pissa",
            AdapterKind::Full => "full",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soka" => Ok(AdapterKind::Soka),
            "lora" => Ok(AdapterKind::Lora),
            "pissa" => Ok(AdapterKind::Pissa),
            "full" => Ok(AdapterKind::Full),
            other => Err(arg_err!("unknown adapter kind {other:?}")),
        }
    }
}

/// Parameter and multiply-add accounting for one adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub trainable_params: u64,
    /// Multiply-adds to apply the trainable update to one input vector.
    pub matvec_flops: u64,
    /// `rows · cols`, the cost of a dense matvec with the merged weight.
    pub dense_equivalent_flops: u64,
}

impl CostReport {
    /// `r` Kronecker terms: `r(mn + pq + 1)` parameters and
    /// `r(pqn + pnm)` multiply-adds.
    pub fn soka(shape: KronShape, r: usize) -> Self {
        let KronShape { m, n, p, q } = shape;
        let r = r as u64;
        let (m, n, p, q) = (m as u64, n as u64, p as u64, q as u64);
        Self {
            trainable_params: r * (m * n + p * q + 1),
            matvec_flops: r * (p * q * n + p * n * m),
            dense_equivalent_flops: m * p * n * q,
        }
    }

    /// Rank-`r` factor pair: `r(rows + cols)` parameters and multiply-adds.
    pub fn low_rank(rows: usize, cols: usize, r: usize) -> Self {
        let (rows, cols, r) = (rows as u64, cols as u64, r as u64);
        Self {
            trainable_params: r * (rows + cols),
            matvec_flops: r * (rows + cols),
            dense_equivalent_flops: rows * cols,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let dense = (rows * cols) as u64;
        Self {
            trainable_params: dense,
            matvec_flops: dense,
            dense_equivalent_flops: dense,
        }
    }
}

/// Gradient of `⟨G, forward(X)⟩` with respect to every trainable parameter
/// and to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Named parameter blocks in [`Adapter::flat_params`] order.
    pub params: Vec<(String, Matrix)>,
    pub input: Matrix,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|(_, g)| g.as_slice().iter().copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, g)| g.frobenius_norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// Apply one weighted Kronecker term to a vector of length `n·q` without
/// forming `U ⊗ V`: `sigma · vec(V · unvec(x, q, n) · Uᵀ)`.
pub fn kron_matvec(term: &KronTerm, x: &Matrix) -> Result<Matrix> {
    let mut madds = 0;
    kron_matvec_counted(term, x, &mut madds)
}

/// [`kron_matvec`] that adds the multiply-adds of its two GEMMs
/// (`p·q·n + p·n·m`) to `madds`.
pub fn kron_matvec_counted(term: &KronTerm, x: &Matrix, madds: &mut u64) -> Result<Matrix> {
    if x.cols() != 1 && x.rows() != 1 {
        return Err(dim_err!(
            "kron_matvec expects a vector, got {}x{}",
            x.rows(),
            x.cols()
        ));
    }
    let y = kron_apply(term, x.as_slice(), madds)?;
    Matrix::column(y)
}

fn kron_apply(term: &KronTerm, x: &[f64], madds: &mut u64) -> Result<Vec<f64>> {
    let KronShape { m, n, p, q } = term.shape();
    if x.len() != n * q {
        return Err(dim_err!(
            "input length {} does not match n*q = {}",
            x.len(),
            n * q
        ));
    }
    let x_mat = unvec_slice(x, q, n)?;
    let vx = term.v.matmul_counted(&x_mat, madds)?;
    let z = vx.matmul_counted(&term.u.transpose(), madds)?;
    // column-major read of the p×m result
    Ok((0..m * p).map(|k| term.sigma * z[(k % p, k / p)]).collect())
}

fn check_batch(x: &Matrix, in_dim: usize) -> Result<()> {
    if x.rows() != in_dim {
        return Err(dim_err!(
            "input has {} rows, adapter expects {in_dim}",
            x.rows()
        ));
    }
    Ok(())
}

fn check_upstream(g: &Matrix, out_dim: usize, batch: usize) -> Result<()> {
    if g.shape() != (out_dim, batch) {
        return Err(dim_err!(
            "upstream gradient is {}x{}, expected {out_dim}x{batch}",
            g.rows(),
            g.cols()
        ));
    }
    Ok(())
}

/// Applies `U ⊗ V` (without `σ`) to every column of `x` at once.
///
/// The rows of `x` split into `n` contiguous `q×batch` blocks `X_c`, one per
/// column of the unvec'd input. `T_c = V·X_c` is stacked as row `c` of the
/// `n × (p·batch)` matrix `T`, and `Z = U·T` is `m × (p·batch)`, whose
/// row-major data is exactly the `(m·p) × batch` output. Returns `(T, Z)`.
fn batched_terms(term: &KronTerm, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let KronShape { n, p, q, .. } = term.shape();
    let batch = x.cols();
    let mut t_cat = Matrix::zeros(n, p * batch);
    for c in 0..n {
        let x_c = Matrix::block_of(q, batch, &x.as_slice()[c * q * batch..(c + 1) * q * batch]);
        let t_c = term.v.matmul(&x_c)?;
        t_cat.as_mut_slice()[c * p * batch..(c + 1) * p * batch].copy_from_slice(t_c.as_slice());
    }
    let z_cat = term.u.matmul(&t_cat)?;
    Ok((t_cat, z_cat))
}

/// How a [`SokaAdapter`]'s terms were initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SokaInit {
    /// Leading KPSVD terms; base is the residual.
    Kpsvd,
    /// Ablation: random `U`, zero `V`, unit `sigma`; base is the full weight.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SokaAdapter {
    pub base: Matrix,
    pub terms: Vec<KronTerm>,
    pub shape: KronShape,
    pub rank_decision: RankDecision,
    pub init: SokaInit,
}

impl SokaAdapter {
    /// KPSVD at full rank, rank selection on the spectrum, truncation, and
    /// residual base.
    pub fn init(w: &Matrix, shape: KronShape, policy: &RankPolicy) -> Result<Self> {
        let full = kpsvd_full(w, shape)?;
        let decision = select_rank(&full.spectrum, policy)?;
        Self::from_decomposition(w, shape, &full.terms, decision)
    }

    /// Like [`SokaAdapter::init`] but with a user-fixed rank.
    pub fn init_with_rank(
        w: &Matrix,
        shape: KronShape,
        rank: usize,
        policy: &RankPolicy,
    ) -> Result<Self> {
        let full = kpsvd_full(w, shape)?;
        let decision = manual_rank(&full.spectrum, rank, policy)?;
        Self::from_decomposition(w, shape, &full.terms, decision)
    }

    fn from_decomposition(
        w: &Matrix,
        shape: KronShape,
        all_terms: &[KronTerm],
        decision: RankDecision,
    ) -> Result<Self> {
        let terms = all_terms[..decision.r_final].to_vec();
        let base = w.sub(&reconstruct_terms(&terms, shape))?;
        Ok(Self {
            base,
            terms,
            shape,
            rank_decision: decision,
            init: SokaInit::Kpsvd,
        })
    }

    /// Kronecker ablation with LoRA-style initialization: `U` uniform on
    /// `±1/√r`, `V = 0`, `sigma = 1`, frozen base equal to `w`.
    pub fn random_init(
        w: &Matrix,
        shape: KronShape,
        rank_decision: RankDecision,
        seed: u64,
    ) -> Result<Self> {
        shape.check_weight(w.rows(), w.cols())?;
        let r = rank_decision.r_final;
        let bound = 1.0 / (r as f64).sqrt();
        let mut rng = seeded(seed);
        let terms = (0..r)
            .map(|_| KronTerm {
                sigma: 1.0,
                u: uniform_matrix(shape.m, shape.n, bound, &mut rng),
                v: Matrix::zeros(shape.p, shape.q),
            })
            .collect();
        Ok(Self {
            base: w.clone(),
            terms,
            shape,
            rank_decision,
            init: SokaInit::Random { seed },
        })
    }

    /// Assemble from stored parts, checking every factor shape.
    pub fn from_parts(
        base: Matrix,
        terms: Vec<KronTerm>,
        shape: KronShape,
        rank_decision: RankDecision,
        init: SokaInit,
    ) -> Result<Self> {
        shape
            .check_weight(base.rows(), base.cols())
            .map_err(|e| Error::Consistency(format!("base: {e}")))?;
        for (k, t) in terms.iter().enumerate() {
            if t.u.shape() != (shape.m, shape.n) || t.v.shape() != (shape.p, shape.q) {
                return Err(Error::Consistency(format!(
                    "term {k} has factors {}x{} and {}x{}, shape is {shape}",
                    t.u.rows(),
                    t.u.cols(),
                    t.v.rows(),
                    t.v.cols()
                )));
            }
        }
        Ok(Self {
            base,
            terms,
            shape,
            rank_decision,
            init,
        })
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Dense `Σ sigma_k U_k ⊗ V_k`.
    pub fn update(&self) -> Matrix {
        reconstruct_terms(&self.terms, self.shape)
    }

    /// Largest deviation of any factor's Frobenius norm from 1.
    pub fn factor_norm_drift(&self) -> f64 {
        self.terms
            .iter()
            .flat_map(|t| [t.u.frobenius_norm(), t.v.frobenius_norm()])
            .map(|n| (n - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with(x, None)
    }

    fn forward_with(&self, x: &Matrix, frozen: Option<&Matrix>) -> Result<Matrix> {
        check_batch(x, self.shape.cols())?;
        let mut y = frozen_or(&self.base, x, frozen)?;
        for term in &self.terms {
            let (_, z) = batched_terms(term, x)?;
            for (o, v) in y.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *o += term.sigma * v;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        self.backward_with(x, g, true)
    }

    fn backward_with(&self, x: &Matrix, g: &Matrix, with_input: bool) -> Result<Gradients> {
        check_batch(x, self.shape.cols())?;
        check_upstream(g, self.shape.rows(), x.cols())?;
        let KronShape { m, n, p, q } = self.shape;
        let mut grad_sigma = vec![0.0; self.terms.len()];
        let mut grad_u: Vec<Matrix> = (0..self.terms.len()).map(|_| Matrix::zeros(m, n)).collect();
        let mut grad_v: Vec<Matrix> = (0..self.terms.len()).map(|_| Matrix::zeros(p, q)).collect();
        let mut grad_x = if with_input {
            self.base.t_matmul(g)?
        } else {
            Matrix::zeros(0, 0)
        };

        let batch = x.cols();
        let g_cat = Matrix::block_of(m, p * batch, g.as_slice());
        for (k, term) in self.terms.iter().enumerate() {
            let (t_cat, z_cat) = batched_terms(term, x)?;
            grad_sigma[k] = g_cat.frobenius_dot(&z_cat)?;
            // ∂/∂U = σ Σ_j G̃_jᵀ V X̃_j
            grad_u[k] = g_cat.matmul_t(&t_cat)?.scale(term.sigma);
            // S_j = G̃_j U, stored as n × (p·batch)
            let s_cat = term.u.t_matmul(&g_cat)?;
            let blk = p * batch;
            for c in 0..n {
                let s_c = Matrix::block_of(p, batch, &s_cat.as_slice()[c * blk..(c + 1) * blk]);
                let x_c =
                    Matrix::block_of(q, batch, &x.as_slice()[c * q * batch..(c + 1) * q * batch]);
                // ∂/∂V = σ Σ_j G̃_j U X̃_jᵀ
                grad_v[k].axpy(term.sigma, &s_c.matmul_t(&x_c)?)?;
                if with_input {
                    // ∂/∂X̃_j = σ Vᵀ G̃_j U
                    let d_c = term.v.t_matmul(&s_c)?;
                    let dst = &mut grad_x.as_mut_slice()[c * q * batch..(c + 1) * q * batch];
                    for (o, v) in dst.iter_mut().zip(d_c.as_slice()) {
                        *o += term.sigma * v;
                    }
                }
            }
        }

        let mut params = Vec::with_capacity(3 * self.terms.len());
        for (k, ((gs, gu), gv)) in grad_sigma.into_iter().zip(grad_u).zip(grad_v).enumerate() {
            params.push((format!("sigma[{k}]"), Matrix::from_fn(1, 1, |_, _| gs)));
            params.push((format!("U[{k}]"), gu));
            params.push((format!("V[{k}]"), gv));
        }
        Ok(Gradients {
            params,
            input: grad_x,
        })
    }

    pub fn merge(&self) -> Matrix {
        let mut merged = self.base.clone();
        merged
            .add_assign(&self.update())
            .expect("update shares the base shape");
        merged
    }

    pub fn cost_report(&self) -> CostReport {
        CostReport::soka(self.shape, self.terms.len())
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.terms {
            out.push(t.sigma);
            out.extend_from_slice(t.u.as_slice());
            out.extend_from_slice(t.v.as_slice());
        }
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let mut rest = params;
        for t in &mut self.terms {
            t.sigma = rest[0];
            rest = &rest[1..];
            let (u, tail) = rest.split_at(t.u.len());
            t.u.as_mut_slice().copy_from_slice(u);
            let (v, tail) = tail.split_at(t.v.len());
            t.v.as_mut_slice().copy_from_slice(v);
            rest = tail;
        }
    }
}

/// `base · x`, or a copy of the caller's precomputed value of it.
fn frozen_or(base: &Matrix, x: &Matrix, frozen: Option<&Matrix>) -> Result<Matrix> {
    match frozen {
        Some(f) if f.shape() == (base.rows(), x.cols()) => Ok(f.clone()),
        Some(f) => Err(dim_err!(
            "frozen output is {}x{}, expected {}x{}",
            f.rows(),
            f.cols(),
            base.rows(),
            x.cols()
        )),
        None => base.matmul(x),
    }
}

fn low_rank_forward(
    base: &Matrix,
    a: &Matrix,
    b: &Matrix,
    scale: f64,
    x: &Matrix,
    frozen: Option<&Matrix>,
) -> Result<Matrix> {
    check_batch(x, base.cols())?;
    let mut y = frozen_or(base, x, frozen)?;
    let btx = b.t_matmul(x)?;
    y.axpy(scale, &a.matmul(&btx)?)?;
    Ok(y)
}

fn low_rank_backward(
    base: &Matrix,
    a: &Matrix,
    b: &Matrix,
    scale: f64,
    x: &Matrix,
    g: &Matrix,
    with_input: bool,
) -> Result<Gradients> {
    check_batch(x, base.cols())?;
    check_upstream(g, base.rows(), x.cols())?;
    // ∂/∂A = s G Xᵀ B,  ∂/∂B = s X Gᵀ A,  ∂/∂X = baseᵀ G + s B Aᵀ G
    let xtb = x.t_matmul(b)?; // batch×r
    let gta = g.t_matmul(a)?; // batch×r
    let grad_a = g.matmul(&xtb)?.scale(scale);
    let grad_b = x.matmul(&gta)?.scale(scale);
    let grad_x = if with_input {
        let mut gx = base.t_matmul(g)?;
        gx.axpy(scale, &b.matmul_t(&gta)?)?;
        gx
    } else {
        Matrix::zeros(0, 0)
    };
    Ok(Gradients {
        params: vec![("A".into(), grad_a), ("B".into(), grad_b)],
        input: grad_x,
    })
}

fn set_pair(a: &mut Matrix, b: &mut Matrix, params: &[f64]) {
    let (pa, pb) = params.split_at(a.len());
    a.as_mut_slice().copy_from_slice(pa);
    b.as_mut_slice().copy_from_slice(pb);
}

fn pair_params(a: &Matrix, b: &Matrix) -> Vec<f64> {
    a.as_slice().iter().chain(b.as_slice()).copied().collect()
}

/// Low-rank adapter `base + scale · A·Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub base: Matrix,
    /// `rows×r`
    pub a: Matrix,
    /// `cols×r`
    pub b: Matrix,
    pub scale: f64,
    pub seed: u64,
}

impl LoraAdapter {
    /// `A` uniform on `±1/√r` from `seed`, `B = 0`, scale 1.
    pub fn init(w: &Matrix, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(arg_err!("LoRA rank must be positive"));
        }
        let bound = 1.0 / (rank as f64).sqrt();
        let mut rng = seeded(seed);
        Ok(Self {
            base: w.clone(),
            a: uniform_matrix(w.rows(), rank, bound, &mut rng),
            b: Matrix::zeros(w.cols(), rank),
            scale: 1.0,
            seed,
        })
    }

    pub fn from_parts(base: Matrix, a: Matrix, b: Matrix, scale: f64, seed: u64) -> Result<Self> {
        check_factor_pair(&base, &a, &b)?;
        Ok(Self {
            base,
            a,
            b,
            scale,
            seed,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        low_rank_forward(&self.base, &self.a, &self.b, self.scale, x, None)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        low_rank_backward(&self.base, &self.a, &self.b, self.scale, x, g, true)
    }

    pub fn merge(&self) -> Matrix {
        let mut merged = self.base.clone();
        let update = self.a.matmul_t(&self.b).expect("factor ranks agree");
        merged
            .axpy(self.scale, &update)
            .expect("update shares the base shape");
        merged
    }

    pub fn cost_report(&self) -> CostReport {
        CostReport::low_rank(self.base.rows(), self.base.cols(), self.rank())
    }
}

/// Low-rank adapter initialized from the top singular triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PissaAdapter {
    pub base: Matrix,
    /// `U_r · diag(√S_r)` at init.
    pub a: Matrix,
    /// `V_r · diag(√S_r)` at init.
    pub b: Matrix,
}

impl PissaAdapter {
    pub fn init(w: &Matrix, rank: usize) -> Result<Self> {
        let max = w.rows().min(w.cols());
        if rank == 0 || rank > max {
            return Err(arg_err!("PiSSA rank {rank} outside 1..={max}"));
        }
        let dec = svd(w)?;
        let root: Vec<f64> = dec.s[..rank].iter().map(|s| s.sqrt()).collect();
        let a = Matrix::from_fn(w.rows(), rank, |i, k| dec.u[(i, k)] * root[k]);
        let b = Matrix::from_fn(w.cols(), rank, |j, k| dec.vt[(k, j)] * root[k]);
        let base = w.sub(&a.matmul_t(&b)?)?;
        Ok(Self { base, a, b })
    }

    pub fn from_parts(base: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        check_factor_pair(&base, &a, &b)?;
        Ok(Self { base, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        low_rank_forward(&self.base, &self.a, &self.b, 1.0, x, None)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        low_rank_backward(&self.base, &self.a, &self.b, 1.0, x, g, true)
    }

    pub fn merge(&self) -> Matrix {
        self.base
            .add(&self.a.matmul_t(&self.b).expect("factor ranks agree"))
            .expect("update shares the base shape")
    }

    pub fn cost_report(&self) -> CostReport {
        CostReport::low_rank(self.base.rows(), self.base.cols(), self.rank())
    }
}

fn check_factor_pair(base: &Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != base.rows() || b.rows() != base.cols() || a.cols() != b.cols() {
        return Err(Error::Consistency(format!(
            "factors {}x{} and {}x{} do not fit a {}x{} base",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            base.rows(),
            base.cols()
        )));
    }
    Ok(())
}

/// Full fine-tuning: every weight entry is a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullAdapter {
    pub weight: Matrix,
}

impl FullAdapter {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_batch(x, self.weight.cols())?;
        self.weight.matmul(x)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        check_batch(x, self.weight.cols())?;
        check_upstream(g, self.weight.rows(), x.cols())?;
        Ok(Gradients {
            params: vec![("W".into(), g.matmul_t(x)?)],
            input: self.weight.t_matmul(g)?,
        })
    }
}

/// Any of the supported adapters behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Adapter {
    Soka(SokaAdapter),
    Lora(LoraAdapter),
    Pissa(PissaAdapter),
    Full(FullAdapter),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Soka(_) => AdapterKind::Soka,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Pissa(_) => AdapterKind::Pissa,
            Adapter::Full(_) => AdapterKind::Full,
        }
    }

    fn base(&self) -> &Matrix {
        match self {
            Adapter::Soka(a) => &a.base,
            Adapter::Lora(a) => &a.base,
            Adapter::Pissa(a) => &a.base,
            Adapter::Full(a) => &a.weight,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.base().cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base().rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Soka(a) => a.forward(x),
            Adapter::Lora(a) => a.forward(x),
            Adapter::Pissa(a) => a.forward(x),
            Adapter::Full(a) => a.forward(x),
        }
    }

    /// Output of the frozen part of the adapter on `x`, which training can
    /// compute once and reuse. `None` when nothing is frozen.
    pub fn frozen_output(&self, x: &Matrix) -> Result<Option<Matrix>> {
        match self {
            Adapter::Full(_) => Ok(None),
            _ => {
                check_batch(x, self.in_dim())?;
                self.base().matmul(x).map(Some)
            }
        }
    }

    /// [`Adapter::forward`] reusing a value from [`Adapter::frozen_output`].
    pub fn forward_with(&self, x: &Matrix, frozen: Option<&Matrix>) -> Result<Matrix> {
        match (self, frozen) {
            (_, None) => self.forward(x),
            (Adapter::Soka(a), f) => a.forward_with(x, f),
            (Adapter::Lora(a), f) => low_rank_forward(&a.base, &a.a, &a.b, a.scale, x, f),
            (Adapter::Pissa(a), f) => low_rank_forward(&a.base, &a.a, &a.b, 1.0, x, f),
            (Adapter::Full(_), Some(_)) => Err(arg_err!("a full adapter has no frozen part")),
        }
    }

    /// Like [`Adapter::backward`] but leaves `input` empty, which saves the
    /// transpose product against the frozen weight.
    pub fn param_gradients(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        match self {
            Adapter::Soka(a) => a.backward_with(x, g, false),
            Adapter::Lora(a) => low_rank_backward(&a.base, &a.a, &a.b, a.scale, x, g, false),
            Adapter::Pissa(a) => low_rank_backward(&a.base, &a.a, &a.b, 1.0, x, g, false),
            Adapter::Full(a) => {
                check_batch(x, a.weight.cols())?;
                check_upstream(g, a.weight.rows(), x.cols())?;
                Ok(Gradients {
                    params: vec![("W".into(), g.matmul_t(x)?)],
                    input: Matrix::zeros(0, 0),
                })
            }
        }
    }

    /// Gradients of `⟨G, forward(X)⟩`.
    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<Gradients> {
        match self {
            Adapter::Soka(a) => a.backward(x, g),
            Adapter::Lora(a) => a.backward(x, g),
            Adapter::Pissa(a) => a.backward(x, g),
            Adapter::Full(a) => a.backward(x, g),
        }
    }

    /// Dense `base + update`.
    pub fn merge(&self) -> Matrix {
        match self {
            Adapter::Soka(a) => a.merge(),
            Adapter::Lora(a) => a.merge(),
            Adapter::Pissa(a) => a.merge(),
            Adapter::Full(a) => a.weight.clone(),
        }
    }

    pub fn cost_report(&self) -> CostReport {
        match self {
            Adapter::Soka(a) => a.cost_report(),
            Adapter::Lora(a) => a.cost_report(),
            Adapter::Pissa(a) => a.cost_report(),
            Adapter::Full(a) => CostReport::full(a.weight.rows(), a.weight.cols()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Adapter::Soka(a) => a.terms.iter().map(KronTerm::param_count).sum(),
            Adapter::Lora(a) => a.a.len() + a.b.len(),
            Adapter::Pissa(a) => a.a.len() + a.b.len(),
            Adapter::Full(a) => a.weight.len(),
        }
    }

    /// Trainable parameters flattened in the order of [`Gradients::flat`].
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Adapter::Soka(a) => a.flat_params(),
            Adapter::Lora(a) => pair_params(&a.a, &a.b),
            Adapter::Pissa(a) => pair_params(&a.a, &a.b),
            Adapter::Full(a) => a.weight.as_slice().to_vec(),
        }
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(dim_err!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            ));
        }
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                message: format!("non-finite parameter {bad}"),
                iterations: 0,
            });
        }
        match self {
            Adapter::Soka(a) => a.set_flat_params(params),
            Adapter::Lora(a) => set_pair(&mut a.a, &mut a.b, params),
            Adapter::Pissa(a) => set_pair(&mut a.a, &mut a.b, params),
            Adapter::Full(a) => a.weight.as_mut_slice().copy_from_slice(params),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::kron;
    use crate::rng::{gaussian_matrix, seeded};
    use crate::testutil::random_matrix;

    fn random_term(shape: KronShape, seed: u64) -> KronTerm {
        let mut rng = seeded(seed);
        KronTerm {
            sigma: 0.7,
            u: gaussian_matrix(shape.m, shape.n, &mut rng),
            v: gaussian_matrix(shape.p, shape.q, &mut rng),
        }
    }

    #[test]
    fn identity_term_is_identity_map() {
        let term = KronTerm {
            sigma: 1.0,
            u: Matrix::identity(3),
            v: Matrix::identity(2),
        };
        let x = random_matrix(6, 1, 1);
        assert_eq!(kron_matvec(&term, &x).unwrap(), x);
    }

    #[test]
    fn matvec_matches_dense_kron() {
        let shape = KronShape::new(3, 2, 2, 3).unwrap();
        let term = random_term(shape, 2);
        let x = random_matrix(6, 1, 3);
        let dense = kron(&term.u, &term.v)
            .unwrap()
            .scale(term.sigma)
            .matmul(&x)
            .unwrap();
        let mut madds = 0;
        let y = kron_matvec_counted(&term, &x, &mut madds).unwrap();
        assert!(y.max_abs_diff(&dense).unwrap() <= 1e-10);
        let KronShape { m, n, p, q } = shape;
        assert_eq!(madds, (p * q * n + p * n * m) as u64);
    }

    #[test]
    fn matvec_is_linear() {
        let shape = KronShape::new(3, 2, 2, 3).unwrap();
        let term = random_term(shape, 4);
        let x = random_matrix(6, 1, 5);
        let y = random_matrix(6, 1, 6);
        let lhs = kron_matvec(&term, &x.add(&y).unwrap()).unwrap();
        let rhs = kron_matvec(&term, &x)
            .unwrap()
            .add(&kron_matvec(&term, &y).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn matvec_rejects_bad_length() {
        let term = random_term(KronShape::new(3, 2, 2, 3).unwrap(), 7);
        assert!(matches!(
            kron_matvec(&term, &Matrix::zeros(5, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn soka_init_is_exact() {
        let w = random_matrix(8, 8, 9);
        let shape = KronShape::new(4, 2, 2, 4).unwrap();
        let ad = SokaAdapter::init(&w, shape, &RankPolicy::default()).unwrap();
        assert!(ad.merge().rel_frobenius_error(&w).unwrap() <= 1e-9);
        let x = random_matrix(8, 5, 10);
        let y = ad.forward(&x).unwrap();
        assert!(y.rel_frobenius_error(&w.matmul(&x).unwrap()).unwrap() <= 1e-8);
        assert_eq!(
            ad.cost_report().trainable_params,
            (ad.rank() * (8 + 8 + 1)) as u64
        );
    }

    #[test]
    fn soka_exact_kronecker_weight() {
        let a = random_matrix(2, 3, 1);
        let b = random_matrix(3, 2, 2);
        let w = kron(&a, &b).unwrap();
        let shape = KronShape::new(2, 3, 3, 2).unwrap();
        for tau in [0.5, 0.95, 0.999] {
            let ad = SokaAdapter::init(&w, shape, &RankPolicy::with_tau(tau)).unwrap();
            assert_eq!(ad.rank(), 1);
            assert!(ad.base.frobenius_norm() <= 1e-12 * w.frobenius_norm());
        }
    }

    #[test]
    fn lora_init_is_zero_update() {
        let w = random_matrix(6, 4, 11);
        let ad = LoraAdapter::init(&w, 2, 3).unwrap();
        let x = random_matrix(4, 3, 12);
        assert_eq!(ad.forward(&x).unwrap(), w.matmul(&x).unwrap());
        assert_eq!(ad.merge(), w);
        assert!(ad.a.as_slice().iter().all(|v| v.abs() < 1.0 / 2f64.sqrt()));
    }

    #[test]
    fn pissa_init_is_exact() {
        let w = random_matrix(6, 4, 13);
        let ad = PissaAdapter::init(&w, 2).unwrap();
        assert!(ad.merge().rel_frobenius_error(&w).unwrap() <= 1e-9);
        assert!(PissaAdapter::init(&w, 5).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let w = random_matrix(8, 8, 14);
        let shape = KronShape::new(4, 2, 2, 4).unwrap();
        let ad = Adapter::Soka(SokaAdapter::init(&w, shape, &RankPolicy::default()).unwrap());
        let x = random_matrix(8, 3, 15);
        let g = ad.backward(&x, &Matrix::zeros(8, 3)).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_factor_sigma_gradient() {
        // σ (I ⊗ I) x = σ x, so ∂⟨G, Y⟩/∂σ = ⟨G, X⟩
        let term = KronTerm {
            sigma: 2.0,
            u: Matrix::identity(2),
            v: Matrix::identity(3),
        };
        let shape = term.shape();
        let decision = manual_rank(&[1.0], 1, &RankPolicy::default()).unwrap();
        let ad = SokaAdapter::from_parts(
            Matrix::zeros(6, 6),
            vec![term],
            shape,
            decision,
            SokaInit::Kpsvd,
        )
        .unwrap();
        let x = random_matrix(6, 4, 16);
        let g = random_matrix(6, 4, 17);
        let grads = ad.backward(&x, &g).unwrap();
        let expected = g.frobenius_dot(&x).unwrap();
        assert!((grads.params[0].1[(0, 0)] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn cost_formulas() {
        let shape = KronShape::new(64, 64, 64, 64).unwrap();
        assert_eq!(CostReport::soka(shape, 128).trainable_params, 1_048_704);
        assert_eq!(
            CostReport::low_rank(4096, 4096, 128).trainable_params,
            1_048_576
        );
        assert_eq!(CostReport::soka(shape, 0).trainable_params, 0);
    }

    #[test]
    fn set_params_round_trips() {
        let w = random_matrix(6, 6, 18);
        let shape = KronShape::new(3, 2, 2, 3).unwrap();
        let mut ad =
            Adapter::Soka(SokaAdapter::init(&w, shape, &RankPolicy::with_tau(0.99)).unwrap());
        let p = ad.flat_params();
        let bumped: Vec<f64> = p.iter().map(|v| v + 0.5).collect();
        ad.set_flat_params(&bumped).unwrap();
        assert_eq!(ad.flat_params(), bumped);
        assert!(ad.set_flat_params(&p[1..]).is_err());
    }
}

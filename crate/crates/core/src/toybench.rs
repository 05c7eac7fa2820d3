//! Deterministic teacher-student fine-tuning harness.
//!
//! A task freezes a "pretrained" weight `W0` whose rearranged spectrum has a
//! few dominant Kronecker components and a small decaying tail, then asks an
//! adapter to fit targets produced by `W* = W0 + Δ`. The clean part of `Δ`
//! is a sum of Kronecker products whose factors lie in the span of `W0`'s
//! dominant factors, so on noiseless tasks the SoKA adapter can represent
//! `W*` exactly. Training is full-batch (or cyclic minibatch) first-order
//! descent on mean squared error.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, FullAdapter, LoraAdapter, PissaAdapter, SokaAdapter};
use crate::error::{arg_err, Error, Result};
use crate::kpsvd::kpsvd_full;
use crate::kron::{kron, unrearrange, unvec_slice, KronShape};
use crate::matrix::Matrix;
use crate::rank::{select_rank, RankDecision, RankPolicy};
use crate::rng::{gaussian_matrix, orthonormal_columns, seeded};

/// Smallest number of dominant components given to `W0`.
const MIN_PRINCIPAL_RANK: usize = 4;
const TAIL_START: f64 = 0.1;
const TAIL_DECAY: f64 = 0.9;

/// Default step size for [`TrainConfig`].
pub const DEFAULT_LEARNING_RATE: f64 = 0.2;
pub const DEFAULT_STEPS: usize = 2000;

/// Parameters of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub rows: usize,
    pub cols: usize,
    pub kp_rank_star: usize,
    #[serde(default)]
    pub noise_eps: f64,
    pub seed: u64,
    /// Number of input columns; defaults to `2 · cols`.
    #[serde(default)]
    pub samples: Option<usize>,
}

impl TaskSpec {
    pub fn id(&self) -> String {
        format!(
            "{}x{}-r{}-eps{}-s{}",
            self.rows, self.cols, self.kp_rank_star, self.noise_eps, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub shape: KronShape,
    /// Frozen pretrained weight.
    pub w0: Matrix,
    /// `W0 + Δ`.
    pub w_star: Matrix,
    pub delta: Matrix,
    /// `cols × samples`, two samples per input dimension by default
    pub inputs: Matrix,
    /// `W_star · inputs`
    pub targets: Matrix,
}

impl SyntheticTask {
    pub fn id(&self) -> String {
        self.spec.id()
    }

    pub fn is_noiseless(&self) -> bool {
        self.spec.noise_eps == 0.0
    }
}

/// Build a reproducible task. Dimensions must factor non-trivially under
/// [`KronShape::auto`].
pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    let shape = KronShape::auto(spec.rows, spec.cols)?;
    if shape.m == 1 || shape.n == 1 {
        return Err(arg_err!(
            "{}x{} has no non-trivial Kronecker factorization (got {shape})",
            spec.rows,
            spec.cols
        ));
    }
    if spec.kp_rank_star == 0 {
        return Err(arg_err!("kp_rank_star must be at least 1"));
    }
    if !(spec.noise_eps >= 0.0 && spec.noise_eps.is_finite()) {
        return Err(arg_err!("noise_eps must be finite and nonnegative"));
    }
    let max_rank = shape.max_rank();
    let principal = spec.kp_rank_star.max(MIN_PRINCIPAL_RANK);
    if principal >= max_rank {
        return Err(arg_err!(
            "shape {shape} supports at most {} components, task needs {principal} plus a tail",
            max_rank
        ));
    }
    let samples = spec.samples.unwrap_or(2 * spec.cols);
    if samples == 0 {
        return Err(arg_err!("samples must be positive"));
    }

    let mut rng = seeded(spec.seed);
    let left = orthonormal_columns(shape.left_len(), max_rank, &mut rng);
    let right = orthonormal_columns(shape.right_len(), max_rank, &mut rng);

    // W0: dominant values 2 + 2(r0 - k)/r0, then a geometric tail.
    let spectrum: Vec<f64> = (0..max_rank)
        .map(|k| {
            if k < principal {
                2.0 + 2.0 * (principal - 1 - k) as f64 / principal as f64
            } else {
                TAIL_START * TAIL_DECAY.powi((k - principal) as i32)
            }
        })
        .collect();
    let r_w0 = Matrix::from_fn(shape.left_len(), shape.right_len(), |i, j| {
        (0..max_rank)
            .map(|k| left[(i, k)] * spectrum[k] * right[(j, k)])
            .sum()
    });
    let w0 = unrearrange(&r_w0, shape)?;

    // Δ factors: orthonormal combinations of W0's dominant factors.
    let r_star = spec.kp_rank_star;
    let mix_left = orthonormal_columns(principal, r_star, &mut rng);
    let mix_right = orthonormal_columns(principal, r_star, &mut rng);
    let mut delta = Matrix::zeros(spec.rows, spec.cols);
    for k in 0..r_star {
        let weight = 1.0 + 0.5 * (r_star - 1 - k) as f64 / r_star as f64;
        let a_vec: Vec<f64> = (0..shape.left_len())
            .map(|i| {
                (0..principal)
                    .map(|c| left[(i, c)] * mix_left[(c, k)])
                    .sum()
            })
            .collect();
        let b_vec: Vec<f64> = (0..shape.right_len())
            .map(|i| {
                (0..principal)
                    .map(|c| right[(i, c)] * mix_right[(c, k)])
                    .sum()
            })
            .collect();
        let a = unvec_slice(&a_vec, shape.m, shape.n)?;
        let b = unvec_slice(&b_vec, shape.p, shape.q)?;
        delta.axpy(weight, &kron(&a, &b)?)?;
    }
    // The noise draw happens even when eps = 0 so that inputs do not depend
    // on the noise level.
    let noise = gaussian_matrix(spec.rows, spec.cols, &mut rng);
    if spec.noise_eps > 0.0 {
        let scale = spec.noise_eps * delta.frobenius_norm() / noise.frobenius_norm();
        delta.axpy(scale, &noise)?;
    }

    let w_star = w0.add(&delta)?;
    let inputs = gaussian_matrix(spec.cols, samples, &mut rng);
    let targets = w_star.matmul(&inputs)?;
    Ok(SyntheticTask {
        spec: spec.clone(),
        shape,
        w0,
        w_star,
        delta,
        inputs,
        targets,
    })
}

/// 3 seeds × {16×16, 64×64, 60×84} × {noiseless, ε = 0.01}, `Δ` of
/// Kronecker rank 2.
pub fn default_battery() -> Vec<TaskSpec> {
    let mut specs = Vec::new();
    for (rows, cols) in [(16, 16), (64, 64), (60, 84)] {
        for noise_eps in [0.0, 0.01] {
            for seed in [1, 2, 3] {
                specs.push(TaskSpec {
                    rows,
                    cols,
                    kp_rank_star: 2,
                    noise_eps,
                    seed,
                    samples: None,
                });
            }
        }
    }
    specs
}

/// Adapter family under training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "soka")]
    Soka,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "pissa")]
    Pissa,
    #[serde(rename = "full")]
    Full,
    /// Kronecker terms with LoRA-style random/zero initialization.
    #[serde(rename = "kron-random")]
    KronRandom,
}

impl Method {
    pub const STANDARD: [Method; 4] = [Method::Soka, Method::Lora, Method::Pissa, Method::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Soka => "soka",
            Method::Lora => "lora",
            Method::Pissa => "pissa",
            Method::Full => "full",
            Method::KronRandom => "kron-random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soka" => Ok(Method::Soka),
            "lora" => Ok(Method::Lora),
            "pissa" => Ok(Method::Pissa),
            "full" => Ok(Method::Full),
            "kron-random" => Ok(Method::KronRandom),
            other => Err(arg_err!(
                "unknown method {other:?} (expected soka, lora, pissa, full or kron-random)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// `None` trains on the full input set every step.
    pub batch_size: Option<usize>,
    pub optimizer: Optimizer,
    /// Seeds adapter initialization and minibatch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: None,
            optimizer: Optimizer::Gd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(arg_err!("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(arg_err!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == Some(0) {
            return Err(arg_err!("batch size must be positive"));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(arg_err!("momentum beta must lie in [0, 1), got {beta}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

/// Per-step loss and gradient norm of one run. Record `k` holds the values
/// at the parameters in effect before the `k`-th update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: String,
    pub method: Method,
    pub rank: usize,
    pub trainable_params: u64,
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
    /// Loss after the last update.
    pub final_loss: f64,
    /// Largest `|‖U‖_F − 1|` or `|‖V‖_F − 1|` at the end of a Kronecker run.
    pub factor_norm_drift: Option<f64>,
    /// Path of a saved adapter snapshot, when one was written.
    pub snapshot: Option<String>,
}

impl TrainLog {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn min_loss(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.loss)
            .chain(std::iter::once(self.final_loss))
            .fold(f64::INFINITY, f64::min)
    }
}

pub struct TrainRun {
    pub log: TrainLog,
    pub adapter: Adapter,
}

/// Rank selected for a task, shared by every method so comparisons run at
/// equal rank.
pub fn task_rank(task: &SyntheticTask, policy: &RankPolicy) -> Result<RankDecision> {
    let full = kpsvd_full(&task.w0, task.shape)?;
    select_rank(&full.spectrum, policy)
}

/// Initial adapter of the given family on top of `W0`.
pub fn build_adapter(
    task: &SyntheticTask,
    method: Method,
    decision: &RankDecision,
    policy: &RankPolicy,
    seed: u64,
) -> Result<Adapter> {
    let r = decision.r_final;
    Ok(match method {
        Method::Soka => Adapter::Soka(SokaAdapter::init(&task.w0, task.shape, policy)?),
        Method::KronRandom => Adapter::Soka(SokaAdapter::random_init(
            &task.w0,
            task.shape,
            decision.clone(),
            seed,
        )?),
        Method::Lora => Adapter::Lora(LoraAdapter::init(&task.w0, r, seed)?),
        Method::Pissa => Adapter::Pissa(PissaAdapter::init(&task.w0, r)?),
        Method::Full => Adapter::Full(FullAdapter {
            weight: task.w0.clone(),
        }),
    })
}

/// Mean squared error of `adapter` on the given columns and its gradient
/// with respect to the trainable parameters.
pub fn loss_and_gradient(
    adapter: &Adapter,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<(f64, Vec<f64>)> {
    loss_and_gradient_with(adapter, inputs, targets, None)
}

fn loss_and_gradient_with(
    adapter: &Adapter,
    inputs: &Matrix,
    targets: &Matrix,
    frozen: Option<&Matrix>,
) -> Result<(f64, Vec<f64>)> {
    let residual = adapter.forward_with(inputs, frozen)?.sub(targets)?;
    let count = residual.len() as f64;
    let loss = residual.frobenius_norm_sq() / count;
    let upstream = residual.scale(2.0 / count);
    let grads = adapter.param_gradients(inputs, &upstream)?;
    Ok((loss, grads.flat()))
}

pub fn loss(adapter: &Adapter, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let residual = adapter.forward(inputs)?.sub(targets)?;
    Ok(residual.frobenius_norm_sq() / residual.len() as f64)
}

fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), idx.len(), |i, j| m[(i, idx[j])])
}

/// Cyclic minibatch schedule: a fixed seeded permutation walked in order.
struct Batches {
    order: Vec<usize>,
    size: usize,
    cursor: usize,
}

impl Batches {
    fn new(samples: usize, size: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut seeded(seed ^ 0x5eed_ba7c));
        Self {
            order,
            size: size.min(samples),
            cursor: 0,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        let n = self.order.len();
        let idx = (0..self.size)
            .map(|k| self.order[(self.cursor + k) % n])
            .collect();
        self.cursor = (self.cursor + self.size) % n;
        idx
    }
}

/// Train one adapter family on `task` from `W0`.
pub fn train(
    task: &SyntheticTask,
    method: Method,
    policy: &RankPolicy,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let decision = task_rank(task, policy)?;
    let adapter = build_adapter(task, method, &decision, policy, config.seed)?;
    train_adapter(task, method, adapter, config)
}

/// Train an already-built adapter.
pub fn train_adapter(
    task: &SyntheticTask,
    method: Method,
    mut adapter: Adapter,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let samples = task.inputs.cols();
    let mut batches = config
        .batch_size
        .filter(|&b| b < samples)
        .map(|b| Batches::new(samples, b, config.seed));

    // The frozen weight never changes, so its output is computed once.
    let frozen = adapter.frozen_output(&task.inputs)?;

    let mut params = adapter.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut records = Vec::with_capacity(config.steps);
    let mut status = RunStatus::Completed;

    for step in 0..config.steps {
        let (loss_value, grad) = match batches.as_mut() {
            None => loss_and_gradient_with(&adapter, &task.inputs, &task.targets, frozen.as_ref())?,
            Some(b) => {
                let idx = b.next();
                let frozen_batch = frozen.as_ref().map(|f| select_columns(f, &idx));
                loss_and_gradient_with(
                    &adapter,
                    &select_columns(&task.inputs, &idx),
                    &select_columns(&task.targets, &idx),
                    frozen_batch.as_ref(),
                )?
            }
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        records.push(StepRecord {
            step,
            loss: loss_value,
            grad_norm,
        });
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            status = RunStatus::Diverged { step };
            break;
        }
        match config.optimizer {
            Optimizer::Gd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= config.learning_rate * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = beta * *v + g;
                    *p -= config.learning_rate * *v;
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            status = RunStatus::Diverged { step: step + 1 };
            break;
        }
        adapter.set_flat_params(&params)?;
    }

    let final_loss = if status == RunStatus::Completed {
        loss(&adapter, &task.inputs, &task.targets)?
    } else {
        f64::NAN
    };
    let (rank, drift) = match &adapter {
        Adapter::Soka(a) => (a.rank(), Some(a.factor_norm_drift())),
        Adapter::Lora(a) => (a.rank(), None),
        Adapter::Pissa(a) => (a.rank(), None),
        Adapter::Full(a) => (a.weight.rows().min(a.weight.cols()), None),
    };
    let log = TrainLog {
        task: task.id(),
        method,
        rank,
        trainable_params: adapter.cost_report().trainable_params,
        records,
        status,
        final_loss,
        factor_norm_drift: drift,
        snapshot: None,
    };
    Ok(TrainRun { log, adapter })
}

/// Summary of one run inside a [`ComparisonReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub steps: usize,
    pub trainable_params: u64,
    /// Loss at steps `round(q·(steps−1))` for `q` in [`QUANTILES`].
    pub loss_at_quantiles: Vec<f64>,
    /// Trapezoidal area under the per-step loss curve.
    pub auc: f64,
    pub max_grad_norm: f64,
    pub final_loss: f64,
    /// Differences to the first log in the comparison.
    pub auc_diff: f64,
    pub final_loss_diff: f64,
    pub diverged: bool,
}

pub const QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub task: String,
    pub reference: Method,
    pub methods: Vec<MethodSummary>,
}

/// Compare runs on one task. All logs must share the task and step count.
pub fn compare_runs(logs: &[TrainLog]) -> Result<ComparisonReport> {
    let first = logs.first().ok_or_else(|| arg_err!("nothing to compare"))?;
    for log in logs {
        if log.records.len() != first.records.len() {
            return Err(arg_err!(
                "{} has {} steps but {} has {}",
                log.method,
                log.records.len(),
                first.method,
                first.records.len()
            ));
        }
        if log.task != first.task {
            return Err(arg_err!("runs span tasks {} and {}", first.task, log.task));
        }
    }
    let summarize = |log: &TrainLog| {
        let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        let n = losses.len();
        let loss_at_quantiles = QUANTILES
            .iter()
            .map(|q| losses[(q * (n - 1) as f64).round() as usize])
            .collect();
        let auc = losses.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
        let max_grad_norm = log
            .records
            .iter()
            .map(|r| r.grad_norm)
            .fold(f64::NEG_INFINITY, f64::max);
        (loss_at_quantiles, auc, max_grad_norm)
    };
    let (_, ref_auc, _) = summarize(first);
    let methods = logs
        .iter()
        .map(|log| {
            let (loss_at_quantiles, auc, max_grad_norm) = summarize(log);
            MethodSummary {
                method: log.method,
                steps: log.records.len(),
                trainable_params: log.trainable_params,
                loss_at_quantiles,
                auc,
                max_grad_norm,
                final_loss: log.final_loss,
                auc_diff: auc - ref_auc,
                final_loss_diff: log.final_loss - first.final_loss,
                diverged: !log.succeeded(),
            }
        })
        .collect();
    Ok(ComparisonReport {
        task: first.task.clone(),
        reference: first.method,
        methods,
    })
}

/// All runs on one task plus their comparison.
pub struct TaskOutcome {
    pub task: SyntheticTask,
    pub logs: Vec<TrainLog>,
    pub comparison: ComparisonReport,
}

/// Train every method on every task. Runs are independent and execute in
/// parallel; results come back in input order.
pub fn run_battery(
    specs: &[TaskSpec],
    methods: &[Method],
    policy: &RankPolicy,
    config: &TrainConfig,
) -> Result<Vec<TaskOutcome>> {
    config.validate()?;
    policy.validate()?;
    let tasks: Vec<SyntheticTask> = specs.iter().map(make_task).collect::<Result<_>>()?;
    let jobs: Vec<(usize, Method)> = (0..tasks.len())
        .flat_map(|t| methods.iter().map(move |&m| (t, m)))
        .collect();
    let logs: Vec<TrainLog> = jobs
        .par_iter()
        .map(|&(t, m)| train(&tasks[t], m, policy, config).map(|run| run.log))
        .collect::<Result<_>>()?;
    let mut logs = logs.into_iter();
    tasks
        .into_iter()
        .map(|task| {
            let task_logs: Vec<TrainLog> = logs.by_ref().take(methods.len()).collect();
            let comparison = compare_runs(&task_logs)?;
            Ok(TaskOutcome {
                task,
                logs: task_logs,
                comparison,
            })
        })
        .collect()
}

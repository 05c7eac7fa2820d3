//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p kronadapt-cli --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use kronadapt::io::{
    load_adapter, load_checkpoint, load_matrix, save_adapter, save_checkpoint, save_matrix,
};
use kronadapt::rank::{elbow_rank, energy_rank, select_rank, RankPolicy};
use kronadapt::rng::seeded;
use kronadapt::toybench::{default_battery, run_battery, Method, TrainConfig};
use kronadapt::{
    approximation_error, kpsvd, kpsvd_full, kron_matvec_counted, Adapter, CostReport, Error,
    FullAdapter, KronShape, KronTerm, LoraAdapter, Matrix, PissaAdapter, SokaAdapter,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

// `ensure!` negates its condition on purpose so that NaN counts as a failure.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn shape(t: (usize, usize, usize, usize)) -> KronShape {
    KronShape::new(t.0, t.1, t.2, t.3).unwrap()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn kpsvd_optimality() -> Outcome {
    let shapes = [
        (2, 3, 4, 5),
        (3, 3, 3, 3),
        (4, 2, 2, 6),
        (5, 1, 2, 7),
        (1, 4, 6, 2),
    ];
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (si, &t) in shapes.iter().enumerate() {
        let s = shape(t);
        for rep in 0..5u64 {
            let w = random(s.rows(), s.cols(), 10_000 + 100 * si as u64 + rep);
            let sv = singular_values(&dense_rearrange(&w, s));
            let total: f64 = sv.iter().map(|v| v * v).sum();
            let full = kpsvd_full(&w, s).map_err(|e| e.to_string())?;
            for r in 1..=s.max_rank() {
                let res = full.truncate(&w, r).map_err(|e| e.to_string())?;
                let err = approximation_error(&w, &res).map_err(|e| e.to_string())?;
                let tail: f64 = sv[r..].iter().map(|v| v * v).sum();
                let dev = (err * err - tail).abs();
                ensure!(
                    dev <= 1e-8 * tail + 1e-14 * total,
                    "shape {s} rep {rep} r={r}: err²={err:e} tail={tail:e}"
                );
                if tail > 0.0 {
                    worst = worst.max(dev / tail);
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{} matrices, {} shapes, {checked} ranks, worst rel {worst:.1e}",
        shapes.len() * 5,
        shapes.len()
    ))
}

// ---------------------------------------------------------------- 2

fn exact_recovery() -> Outcome {
    let shapes = [(2, 3, 4, 5), (3, 3, 3, 3), (2, 4, 3, 2)];
    let mut cases = 0;
    for s_true in 1..=3usize {
        for (i, &t) in shapes.iter().enumerate() {
            let sh = shape(t);
            let a = orthonormal_matrices(s_true, sh.m, sh.n, 700 + i as u64);
            let b = orthonormal_matrices(s_true, sh.p, sh.q, 800 + i as u64);
            let mut w = Matrix::zeros(sh.rows(), sh.cols());
            for k in 0..s_true {
                w.axpy(1.0 - 0.1 * k as f64, &dense_kron(&a[k], &b[k]))
                    .unwrap();
            }
            let res = kpsvd(&w, sh, s_true).map_err(|e| e.to_string())?;
            ensure!(
                res.residual_fro <= 1e-9 * frob(&w),
                "s={s_true} {sh}: residual {:e}",
                res.residual_fro
            );
            let full = kpsvd_full(&w, sh).map_err(|e| e.to_string())?;
            let d = select_rank(&full.spectrum, &RankPolicy::with_tau(0.95))
                .map_err(|e| e.to_string())?;
            ensure!(
                d.r_final == s_true,
                "s={s_true} {sh}: select_rank gave {}",
                d.r_final
            );
            cases += 1;
        }
    }
    Ok(format!("{cases} cases, s in 1..=3"))
}

// ---------------------------------------------------------------- 3

fn matvec_equivalence() -> Outcome {
    let mut rng = seeded(3);
    let mut worst = 0.0f64;
    let n_cases = 64;
    for i in 0..n_cases {
        let s = KronShape::new(
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
        )
        .unwrap();
        let term = KronTerm::new(
            rng.random_range(0.1..3.0),
            random(s.m, s.n, 3 * i),
            random(s.p, s.q, 3 * i + 1),
        )
        .unwrap();
        let x = random(s.cols(), 1, 3 * i + 2);
        let mut madds = 0u64;
        let y = kron_matvec_counted(&term, &x, &mut madds).map_err(|e| e.to_string())?;
        let dense = dense_kron(&term.u, &term.v)
            .scale(term.sigma)
            .matmul(&x)
            .unwrap();
        let diff = y.max_abs_diff(&dense).unwrap();
        worst = worst.max(diff);
        ensure!(diff <= 1e-10, "instance {i} shape {s}: diff {diff:e}");
        let expect = (s.p * s.q * s.n + s.p * s.n * s.m) as u64;
        ensure!(
            madds == expect,
            "instance {i} shape {s}: counted {madds}, formula {expect}"
        );
    }
    Ok(format!(
        "{n_cases} instances, worst diff {worst:.1e}, counts exact"
    ))
}

// ---------------------------------------------------------------- 4

fn parameter_formulas() -> Outcome {
    let s = shape((64, 64, 64, 64));
    let soka = CostReport::soka(s, 128);
    let lora = CostReport::low_rank(4096, 4096, 128);
    ensure!(
        soka.trainable_params == 1_048_704,
        "SoKA params {}",
        soka.trainable_params
    );
    ensure!(
        lora.trainable_params == 1_048_576,
        "LoRA params {}",
        lora.trainable_params
    );
    let mut cases = 1;
    for &(t, r) in &[
        ((2, 3, 4, 5), 1),
        ((3, 3, 3, 3), 7),
        ((8, 4, 2, 16), 5),
        ((1, 1, 1, 1), 1),
    ] {
        let s = shape(t);
        let (m, n, p, q) = t;
        let c = CostReport::soka(s, r);
        ensure!(
            c.trainable_params == (r * (m * n + p * q + 1)) as u64,
            "SoKA params for {s}"
        );
        ensure!(
            c.matvec_flops == (r * (p * q * n + p * n * m)) as u64,
            "SoKA madds for {s}"
        );
        let n_sq = s.rows();
        if s.rows() == s.cols() {
            let l = CostReport::low_rank(n_sq, n_sq, r);
            ensure!(
                l.trainable_params == (2 * n_sq * r) as u64,
                "LoRA 2Nr for N={n_sq}"
            );
        }
        // The adapter objects report the same numbers as the formulas.
        let w = random(s.rows(), s.cols(), 41);
        let r_adapter = r.min(s.max_rank());
        let a = SokaAdapter::init_with_rank(&w, s, r_adapter, &RankPolicy::default())
            .map_err(|e| e.to_string())?;
        ensure!(
            a.cost_report() == CostReport::soka(s, r_adapter),
            "adapter cost for {s}"
        );
        ensure!(
            Adapter::Soka(a).num_params() as u64 == CostReport::soka(s, r_adapter).trainable_params,
            "flat length for {s}"
        );
        cases += 1;
    }
    Ok(format!(
        "64^4 r=128: 1,048,704 vs 1,048,576; {cases} formula cases"
    ))
}

// ---------------------------------------------------------------- 5

fn gradient_checks() -> Outcome {
    let shapes = [(2, 3, 4, 5), (4, 4, 4, 4), (3, 5, 4, 2)];
    let mut worst = 0.0f64;
    let mut runs = 0;
    for seed in 1..=3u64 {
        for &t in &shapes {
            let s = shape(t);
            let w = random(s.rows(), s.cols(), seed);
            let r = 3.min(s.max_rank());
            let x = random(s.cols(), 5, 100 + seed);
            let y = random(s.rows(), 5, 200 + seed);
            let adapters = [
                Adapter::Soka(
                    SokaAdapter::init_with_rank(&w, s, r, &RankPolicy::default()).unwrap(),
                ),
                Adapter::Lora(LoraAdapter::init(&w, r, seed).unwrap()),
                Adapter::Pissa(PissaAdapter::init(&w, r).unwrap()),
            ];
            for a in adapters {
                for state in [a.clone(), perturbed(&a, 300 + seed, 0.05)] {
                    let err = finite_difference_error(&state, &x, &y, 1e-5);
                    worst = worst.max(err);
                    ensure!(
                        err <= 1e-5,
                        "{:?} shape {s} seed {seed}: rel err {err:e}",
                        a.kind()
                    );
                    runs += 1;
                }
            }
        }
    }
    Ok(format!(
        "{runs} adapter states, 3 seeds x 3 shapes, worst rel err {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn rank_battery() -> Outcome {
    let er = |s: &[f64], tau| energy_rank(s, tau).unwrap();
    ensure!(er(&[2.0, 1.0, 1.0], 0.5) == 1, "energy [2,1,1]");
    ensure!(er(&[1.0, 0.0, 0.0], 0.9) == 1, "energy [1,0,0]");
    ensure!(er(&[1.0, 1.0, 1.0, 1.0], 0.95) == 4, "energy [1,1,1,1]");
    ensure!(
        elbow_rank(&[10.0, 9.0, 1.0, 0.9]).unwrap() == 2,
        "elbow [10,9,1,0.9]"
    );
    ensure!(elbow_rank(&[5.0, 5.0, 5.0]).unwrap() == 1, "elbow [5,5,5]");
    ensure!(elbow_rank(&[3.0, 1.0]).unwrap() == 1, "elbow [3,1]");
    ensure!(elbow_rank(&[4.0]).unwrap() == 1, "elbow length 1");
    let d = select_rank(&[10.0, 9.0, 1.0, 0.9], &RankPolicy::with_tau(0.95)).unwrap();
    ensure!(
        (d.r_energy, d.r_elbow, d.r_final) == (2, 2, 2),
        "select [10,9,1,0.9]: {d:?}"
    );
    let capped = RankPolicy {
        r_max: Some(2),
        ..RankPolicy::with_tau(0.95)
    };
    let d = select_rank(&[1.0; 4], &capped).unwrap();
    ensure!(
        (d.r_energy, d.r_elbow, d.r_final) == (4, 1, 1),
        "select [1,1,1,1] r_max 2: {d:?}"
    );
    let floor = RankPolicy {
        r_min: 2,
        ..RankPolicy::default()
    };
    let d = select_rank(&[0.0; 5], &floor).unwrap();
    ensure!(d.r_final == 2 && d.clamped, "all-zero spectrum: {d:?}");
    ensure!(
        matches!(
            energy_rank(&[0.0, 0.0], 0.5),
            Err(Error::DegenerateSpectrum)
        ),
        "all-zero energy_rank must be degenerate"
    );
    ensure!(
        matches!(energy_rank(&[1.0, 2.0], 0.5), Err(Error::Argument(_))),
        "unsorted spectrum must be rejected"
    );

    let mut rng = seeded(6);
    for case in 0..1000 {
        let len = rng.random_range(1..=30);
        let mut s: Vec<f64> = (0..len)
            .map(|_| rng.random_range(0.0..10.0f64).powi(2))
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let tau = rng.random_range(0.05..0.99);
        let p = RankPolicy::with_tau(tau);
        let base = select_rank(&s, &p).unwrap();
        for c in [0.25, 1024.0, 2f64.powi(-30), rng.random_range(1e-3..1e3)] {
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            let d = select_rank(&scaled, &p).unwrap();
            ensure!(
                (d.r_energy, d.r_elbow, d.r_final) == (base.r_energy, base.r_elbow, base.r_final),
                "case {case}: scaling by {c} changed the decision"
            );
        }
        let tau2 = rng.random_range(tau..1.0);
        let hi = select_rank(&s, &RankPolicy::with_tau(tau2)).unwrap();
        ensure!(
            hi.r_energy >= base.r_energy && hi.r_final >= base.r_final,
            "case {case}: not monotone in tau"
        );
    }
    Ok("worked examples exact; 1000 spectra scale-invariant and tau-monotone".into())
}

// ---------------------------------------------------------------- 7

fn init_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for (i, &t) in [(2, 3, 4, 5), (4, 4, 4, 4), (3, 2, 5, 6)]
        .iter()
        .enumerate()
    {
        let s = shape(t);
        let w = random(s.rows(), s.cols(), 70 + i as u64);
        let x = random(s.cols(), 7, 80 + i as u64);
        let base = w.matmul(&x).unwrap();
        for tau in [0.5, 0.95] {
            let soka =
                SokaAdapter::init(&w, s, &RankPolicy::with_tau(tau)).map_err(|e| e.to_string())?;
            let rel = soka
                .forward(&x)
                .unwrap()
                .sub(&base)
                .unwrap()
                .frobenius_norm()
                / frob(&base);
            worst = worst.max(rel);
            ensure!(rel <= 1e-8, "SoKA {s} tau {tau}: rel {rel:e}");
        }
        for r in [1, 3] {
            let pissa = PissaAdapter::init(&w, r).map_err(|e| e.to_string())?;
            let rel = pissa
                .forward(&x)
                .unwrap()
                .sub(&base)
                .unwrap()
                .frobenius_norm()
                / frob(&base);
            worst = worst.max(rel);
            ensure!(rel <= 1e-8, "PiSSA {s} r {r}: rel {rel:e}");
            let lora = LoraAdapter::init(&w, r, 5).map_err(|e| e.to_string())?;
            ensure!(
                bits(&lora.forward(&x).unwrap()) == bits(&base),
                "LoRA {s} r {r} is not exact"
            );
        }
    }
    Ok(format!("SoKA/PiSSA worst rel {worst:.1e}, LoRA bit-exact"))
}

// ---------------------------------------------------------------- 8

fn toy_battery() -> Outcome {
    let methods = [
        Method::Soka,
        Method::KronRandom,
        Method::Lora,
        Method::Pissa,
        Method::Full,
    ];
    let config = TrainConfig::default();
    let outcomes = run_battery(
        &default_battery(),
        &methods,
        &RankPolicy::default(),
        &config,
    )
    .map_err(|e| e.to_string())?;
    let mut noiseless = 0;
    let mut slowest = 0;
    for o in &outcomes {
        let log = |m: Method| o.logs.iter().find(|l| l.method == m).unwrap();
        let (soka, random) = (log(Method::Soka), log(Method::KronRandom));
        let (l0, r0) = (soka.records[0].loss, random.records[0].loss);
        ensure!(
            l0 <= r0 * (1.0 + 1e-12),
            "(a) {}: SoKA step-0 loss {l0:e} > random {r0:e}",
            o.task.id()
        );
        if o.task.is_noiseless() {
            let hit = soka.records.iter().position(|r| r.loss <= 1e-6);
            let hit = hit.or((soka.final_loss <= 1e-6).then_some(config.steps));
            let Some(step) = hit else {
                return Err(format!(
                    "(b) {}: SoKA min loss {:e}",
                    o.task.id(),
                    soka.min_loss()
                ));
            };
            slowest = slowest.max(step);
            noiseless += 1;
        }
        for l in &o.logs {
            let finite = l.succeeded()
                && l.records
                    .iter()
                    .all(|r| r.loss.is_finite() && r.grad_norm.is_finite());
            ensure!(
                finite,
                "(c) {} {}: non-finite loss or gradient",
                o.task.id(),
                l.method.as_str()
            );
        }
    }
    Ok(format!(
        "{} tasks x {} methods; SoKA reaches 1e-6 on {noiseless} noiseless tasks by step {slowest}",
        outcomes.len(),
        methods.len()
    ))
}

// ---------------------------------------------------------------- 9

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kronadapt"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("KRONADAPT_SEED")
        .output()
        .expect("spawn kronadapt")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn io_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();

    for (i, &(r, c)) in [(1, 1), (5, 3), (12, 40)].iter().enumerate() {
        let m = random(r, c, 90 + i as u64);
        let p = t.join(format!("m{i}.kamx"));
        save_matrix(&m, &p).map_err(|e| e.to_string())?;
        ensure!(
            bits(&load_matrix(&p).unwrap()) == bits(&m),
            "matrix {r}x{c} not bit-exact"
        );
    }

    let s = shape((2, 3, 4, 5));
    let w = random(s.rows(), s.cols(), 91);
    let x = random(s.cols(), 4, 92);
    let adapters = [
        Adapter::Soka(SokaAdapter::init(&w, s, &RankPolicy::default()).unwrap()),
        Adapter::Lora(LoraAdapter::init(&w, 2, 1).unwrap()),
        Adapter::Pissa(PissaAdapter::init(&w, 2).unwrap()),
        Adapter::Full(FullAdapter { weight: w.clone() }),
    ];
    for (i, a) in adapters.iter().enumerate() {
        let a = perturbed(a, 93, 0.1);
        let d = t.join(format!("ckpt{i}"));
        save_adapter(&a, &d).map_err(|e| e.to_string())?;
        let back = load_adapter(&d).map_err(|e| e.to_string())?;
        ensure!(back == a, "{:?} checkpoint differs after reload", a.kind());
        ensure!(
            bits(&back.forward(&x).unwrap()) == bits(&a.forward(&x).unwrap()),
            "{:?} forward not bit-exact",
            a.kind()
        );
    }

    // Golden files: the committed matrix decodes to its known entries and the
    // committed checkpoint re-serializes to identical bytes.
    let g = load_matrix(golden_dir().join("matrix_3x2.kamx")).map_err(|e| e.to_string())?;
    let expect = [1.0, -2.5, 0.1, 1e-300, std::f64::consts::PI, -0.0];
    ensure!(
        g.shape() == (3, 2) && bits(&g) == expect.map(f64::to_bits).to_vec(),
        "golden matrix decodes wrongly"
    );
    let golden_ckpt = golden_dir().join("soka_checkpoint");
    let ckpt = load_checkpoint(&golden_ckpt).map_err(|e| e.to_string())?;
    let resaved = t.join("resaved");
    save_checkpoint(&ckpt, &resaved).map_err(|e| e.to_string())?;
    ensure!(
        tree(&resaved) == tree(&golden_ckpt),
        "golden checkpoint does not re-serialize byte for byte"
    );

    // CLI exit codes.
    let input = t.join("w.kamx");
    save_matrix(&w, &input).unwrap();
    let input_s = input.to_str().unwrap();
    let ck = t.join("cli_ckpt");
    let ck_s = ck.to_str().unwrap();

    let o = run(&[
        "decompose",
        "--input",
        input_s,
        "--shape",
        "2,3,4,6",
        "--out",
        ck_s,
    ]);
    ensure!(
        code(&o) == 2 && stderr(&o).starts_with("kronadapt: error[argument]"),
        "bad shape: exit {} {}",
        code(&o),
        stderr(&o)
    );
    let o = run(&[
        "decompose",
        "--input",
        input_s,
        "--shape",
        "2,3,4,5",
        "--rank",
        "2",
        "--tau",
        "0.9",
        "--out",
        ck_s,
    ]);
    ensure!(code(&o) == 2, "conflicting flags: exit {}", code(&o));
    let o = run(&[
        "decompose",
        "--input",
        t.join("absent.kamx").to_str().unwrap(),
        "--shape",
        "2,3,4,5",
        "--out",
        ck_s,
    ]);
    ensure!(
        code(&o) == 3 && stderr(&o).starts_with("kronadapt: error[io]"),
        "missing input: exit {} {}",
        code(&o),
        stderr(&o)
    );
    let garbage = t.join("garbage.kamx");
    fs::write(&garbage, b"not a matrix").unwrap();
    let o = run(&[
        "decompose",
        "--input",
        garbage.to_str().unwrap(),
        "--shape",
        "2,3,4,5",
        "--out",
        ck_s,
    ]);
    ensure!(code(&o) == 3, "bad magic: exit {}", code(&o));

    let o = run(&[
        "decompose",
        "--input",
        input_s,
        "--shape",
        "2,3,4,5",
        "--out",
        ck_s,
    ]);
    ensure!(code(&o) == 0, "decompose failed: {}", stderr(&o));
    let o = run(&["inspect", "--checkpoint", ck_s, "--verify"]);
    ensure!(
        code(&o) == 0,
        "fresh checkpoint failed verify: {}",
        String::from_utf8_lossy(&o.stdout)
    );

    // A flipped value inside a payload is a verification failure...
    let base = ck.join("base.kamx");
    let pristine = fs::read(&base).unwrap();
    let mut flipped = pristine.clone();
    let at = 22 + 8 * 3;
    let v = f64::from_le_bytes(flipped[at..at + 8].try_into().unwrap()) + 0.5;
    flipped[at..at + 8].copy_from_slice(&v.to_le_bytes());
    fs::write(&base, &flipped).unwrap();
    let o = run(&["inspect", "--checkpoint", ck_s, "--verify"]);
    ensure!(
        code(&o) == 4 && stderr(&o).starts_with("kronadapt: error[verify]"),
        "corrupted value: exit {} {}",
        code(&o),
        stderr(&o)
    );
    // ...while a truncated payload cannot even be loaded.
    fs::write(&base, &pristine[..pristine.len() - 5]).unwrap();
    let o = run(&["inspect", "--checkpoint", ck_s]);
    ensure!(code(&o) == 3, "truncated payload: exit {}", code(&o));
    fs::remove_file(&base).unwrap();
    let o = run(&["inspect", "--checkpoint", ck_s]);
    ensure!(code(&o) == 3, "missing payload: exit {}", code(&o));

    Ok("matrices and 4 checkpoint kinds bit-exact; golden files match; exit codes 2/3/4".into())
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let input = t.join("w.kamx");
    save_matrix(&random(12, 20, 5), &input).unwrap();
    let spec = t.join("tasks.toml");
    fs::write(
        &spec,
        "[[task]]\nrows = 16\ncols = 16\nkp_rank_star = 2\nseed = 4\n\n\
         [[task]]\nrows = 16\ncols = 16\nkp_rank_star = 1\nnoise_eps = 0.01\nseed = 5\n",
    )
    .unwrap();

    let mut compared = 0;
    for name in ["decompose", "bench", "train"] {
        let mut trees = Vec::new();
        let mut stdouts = Vec::new();
        for round in 0..2 {
            let out = t.join(format!("{name}{round}"));
            let out_s = out.to_str().unwrap().to_string();
            let args: Vec<&str> = match name {
                "decompose" => vec![
                    "decompose",
                    "--input",
                    input.to_str().unwrap(),
                    "--shape",
                    "3,4,4,5",
                    "--tau",
                    "0.9",
                    "--out",
                    &out_s,
                ],
                "bench" => vec![
                    "bench",
                    "--shape",
                    "4,4,4,4",
                    "--rank",
                    "3",
                    "--lora-rank",
                    "2",
                    "--seed",
                    "11",
                    "--out",
                    &out_s,
                ],
                _ => vec![
                    "train",
                    "--task-spec",
                    spec.to_str().unwrap(),
                    "--method",
                    "soka,kron-random,lora,pissa,full",
                    "--steps",
                    "40",
                    "--batch-size",
                    "8",
                    "--momentum",
                    "0.5",
                    "--seed",
                    "7",
                    "--out",
                    &out_s,
                ],
            };
            let o = run(&args);
            ensure!(code(&o) == 0, "{name} failed: {}", stderr(&o));
            trees.push(tree(&out));
            stdouts.push(o.stdout);
        }
        ensure!(!trees[0].is_empty(), "{name} wrote no files");
        ensure!(trees[0] == trees[1], "{name} outputs differ between runs");
        // Bench prints wall-clock timings, so only its files are compared.
        if name != "bench" {
            ensure!(
                stdouts[0] == stdouts[1],
                "{name} stdout differs between runs"
            );
        }
        compared += trees[0].len();
    }
    Ok(format!(
        "decompose, bench, train: {compared} files byte-identical across two runs"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("kpsvd optimality", kpsvd_optimality),
        ("exact recovery", exact_recovery),
        ("matvec equivalence and cost", matvec_equivalence),
        ("parameter formulas", parameter_formulas),
        ("gradient checks", gradient_checks),
        ("rank-selector battery", rank_battery),
        ("init exactness", init_exactness),
        ("toy battery", toy_battery),
        ("io round trips", io_round_trips),
        ("determinism", determinism),
    ];
    let filter: Option<usize> = std::env::var("KRONADAPT_CRITERION")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {id:2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

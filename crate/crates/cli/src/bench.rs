use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::Args;
use kronadapt::io::write_atomic;
use kronadapt::report::{cost_csv, cost_json, CostEntry};
use kronadapt::rng::{gaussian_matrix, seeded};
use kronadapt::{kron_matvec_counted, CostReport, KronTerm, Matrix};
use serde_json::json;

use crate::{CliError, CliResult, Ctx, SeedArg, ShapeArg};

pub const MIN_TRIALS: usize = 11;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Factor shape `m,n,p,q`, or `auto` together with --rows and --cols.
    #[arg(long)]
    shape: ShapeArg,
    #[arg(long, requires = "cols")]
    rows: Option<usize>,
    #[arg(long, requires = "rows")]
    cols: Option<usize>,
    /// Number of Kronecker terms.
    #[arg(long)]
    rank: usize,
    /// LoRA rank to compare against (defaults to --rank).
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Timed repetitions per path; the median is reported.
    #[arg(long)]
    trials: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    /// Directory for cost.csv and cost.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

pub fn run(ctx: &Ctx, args: BenchArgs) -> CliResult {
    let seed = args.seed.resolve(&ctx.config)?;
    let trials = args
        .trials
        .or(ctx.config.bench.trials)
        .unwrap_or(MIN_TRIALS);
    if trials < MIN_TRIALS {
        return Err(CliError::argument(format!(
            "--trials must be at least {MIN_TRIALS}, got {trials}"
        )));
    }
    let shape = match (args.shape, args.rows, args.cols) {
        (ShapeArg::Explicit(s), None, None) => s,
        (shape, Some(rows), Some(cols)) => shape.resolve(rows, cols)?,
        (ShapeArg::Auto, _, _) => {
            return Err(CliError::argument("--shape auto needs --rows and --cols"))
        }
        _ => unreachable!("clap pairs --rows with --cols"),
    };
    let (rows, cols) = (shape.rows(), shape.cols());
    let r = args.rank;
    if r == 0 || r > shape.max_rank() {
        return Err(CliError::argument(format!(
            "--rank {r} outside 1..={} for shape {shape}",
            shape.max_rank()
        )));
    }
    let r_lora = args.lora_rank.unwrap_or(r);
    if r_lora == 0 || r_lora > rows.min(cols) {
        return Err(CliError::argument(format!(
            "--lora-rank {r_lora} outside 1..={}",
            rows.min(cols)
        )));
    }

    let soka = CostReport::soka(shape, r);
    let lora = CostReport::low_rank(rows, cols, r_lora);
    let entries = vec![
        CostEntry {
            label: "soka".into(),
            rank: r,
            cost: soka,
        },
        CostEntry {
            label: "lora".into(),
            rank: r_lora,
            cost: lora,
        },
        CostEntry {
            label: "full".into(),
            rank: rows.min(cols),
            cost: CostReport::full(rows, cols),
        },
    ];

    // Random operands for the measured paths.
    let mut rng = seeded(seed);
    let terms: Vec<KronTerm> = (0..r)
        .map(|_| {
            let u = gaussian_matrix(shape.m, shape.n, &mut rng);
            let v = gaussian_matrix(shape.p, shape.q, &mut rng);
            KronTerm::new(1.0, u, v)
        })
        .collect::<kronadapt::Result<_>>()?;
    let a = gaussian_matrix(rows, r_lora, &mut rng);
    let b = gaussian_matrix(cols, r_lora, &mut rng);
    let x = gaussian_matrix(cols, 1, &mut rng);

    let soka_path = |madds: &mut u64| -> kronadapt::Result<Matrix> {
        let mut y = Matrix::zeros(rows, 1);
        for t in &terms {
            y.add_assign(&kron_matvec_counted(t, &x, madds)?)?;
        }
        Ok(y)
    };
    let lora_path = || -> kronadapt::Result<Matrix> { a.matmul(&b.t_matmul(&x)?) };

    let mut counted = 0u64;
    soka_path(&mut counted)?;
    if counted != soka.matvec_flops {
        return Err(CliError::numerical(format!(
            "counted {counted} multiply-adds, formula gives {}",
            soka.matvec_flops
        )));
    }

    let mut soka_times = Vec::with_capacity(trials);
    let mut lora_times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        std::hint::black_box(soka_path(&mut 0)?);
        soka_times.push(t0.elapsed());
        let t0 = Instant::now();
        std::hint::black_box(lora_path()?);
        lora_times.push(t0.elapsed());
    }
    let soka_median = median(soka_times);
    let lora_median = median(lora_times);

    // Timings are machine-dependent and stay out of the report files.
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| kronadapt::Error::io(dir, e))?;
        write_atomic(&dir.join("cost.csv"), cost_csv(&entries).as_bytes())?;
        write_atomic(&dir.join("cost.json"), cost_json(&entries).as_bytes())?;
    }

    ctx.say(format!("shape={shape} rows={rows} cols={cols}"));
    for e in &entries {
        ctx.say(format!(
            "{:5} rank={:<5} params={:<12} matvec_madds={:<12} dense_madds={}",
            e.label,
            e.rank,
            e.cost.trainable_params,
            e.cost.matvec_flops,
            e.cost.dense_equivalent_flops
        ));
    }
    ctx.say(format!(
        "counted soka matvec multiply-adds: {counted} (matches formula)"
    ));
    ctx.say(format!(
        "median of {trials} trials: soka {:.3} us, lora {:.3} us",
        soka_median.as_secs_f64() * 1e6,
        lora_median.as_secs_f64() * 1e6
    ));
    ctx.emit_json(&json!({
        "shape": shape.to_string(),
        "costs": entries.iter().map(|e| json!({
            "label": e.label,
            "rank": e.rank,
            "trainable_params": e.cost.trainable_params,
            "matvec_flops": e.cost.matvec_flops,
            "dense_equivalent_flops": e.cost.dense_equivalent_flops,
        })).collect::<Vec<_>>(),
        "counted_soka_madds": counted,
        "trials": trials,
        "median_seconds": { "soka": soka_median.as_secs_f64(), "lora": lora_median.as_secs_f64() },
    }));
    Ok(())
}

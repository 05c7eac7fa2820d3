use std::path::PathBuf;

use clap::Args;
use kronadapt::io::{load_matrix, save_checkpoint, write_atomic, Checkpoint};
use kronadapt::rank::GapMetric;
use kronadapt::report::{fmt17, rank_decision_csv, rank_decision_json};
use kronadapt::{Adapter, RankPolicy, SokaAdapter};
use serde_json::json;

use crate::{CliError, CliResult, Ctx, ShapeArg};

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Weight matrix in KAMX format.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Factor shape `m,n,p,q` with `m·p = rows`, `n·q = cols`, or `auto`.
    #[arg(long)]
    shape: ShapeArg,
    /// Keep exactly this many terms instead of selecting dynamically.
    #[arg(long, conflicts_with_all = ["tau", "rmin", "rmax"])]
    rank: Option<usize>,
    /// Energy threshold in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rmin: Option<usize>,
    #[arg(long)]
    rmax: Option<usize>,
    /// Gap measure for the elbow criterion: raw or log.
    #[arg(long)]
    gap: Option<GapMetric>,
    /// Checkpoint directory to write.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

pub fn run(ctx: &Ctx, args: DecomposeArgs) -> CliResult {
    let cfg = &ctx.config.decompose;
    let defaults = RankPolicy::default();
    let gap = match (args.gap, &cfg.gap) {
        (Some(g), _) => g,
        (None, Some(s)) => s.parse()?,
        (None, None) => defaults.gap,
    };
    let policy = RankPolicy {
        tau: args.tau.or(cfg.tau).unwrap_or(defaults.tau),
        r_min: args.rmin.or(cfg.r_min).unwrap_or(defaults.r_min),
        r_max: args.rmax.or(cfg.r_max).or(defaults.r_max),
        gap,
    };
    policy.validate()?;
    if args.rank == Some(0) {
        return Err(CliError::argument("--rank must be at least 1"));
    }

    let w = load_matrix(&args.input)?;
    let shape = args.shape.resolve(w.rows(), w.cols())?;
    let adapter = match args.rank {
        Some(r) => SokaAdapter::init_with_rank(&w, shape, r, &policy)?,
        None => SokaAdapter::init(&w, shape, &policy)?,
    };
    let decision = adapter.rank_decision.clone();
    let residual_fro = adapter.base.frobenius_norm();
    let params = adapter.cost_report().trainable_params;

    save_checkpoint(&Checkpoint::init(Adapter::Soka(adapter)), &args.out)?;
    write_atomic(
        &args.out.join("rank_decision.csv"),
        rank_decision_csv(&decision).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("rank_decision.json"),
        rank_decision_json(&decision).as_bytes(),
    )?;

    ctx.say(format!(
        "shape={shape} mode={} r_energy={} r_elbow={} r_final={} residual_fro={} trainable_params={params}",
        decision.mode.as_str(),
        decision.r_energy,
        decision.r_elbow,
        decision.r_final,
        fmt17(residual_fro),
    ));
    ctx.emit_json(&json!({
        "shape": shape.to_string(),
        "mode": decision.mode.as_str(),
        "r_energy": decision.r_energy,
        "r_elbow": decision.r_elbow,
        "r_final": decision.r_final,
        "clamped": decision.clamped,
        "residual_fro": residual_fro,
        "trainable_params": params,
        "checkpoint": args.out.display().to_string(),
    }));
    Ok(())
}

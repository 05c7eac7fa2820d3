use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use kronadapt::io::write_atomic;
use kronadapt::report::{
    comparison_csv, comparison_json, curves_csv, fmt17, train_log_csv, train_log_json,
};
use kronadapt::toybench::{
    default_battery, run_battery, Method, Optimizer, RunStatus, TaskSpec, TrainConfig,
};
use kronadapt::RankPolicy;
use serde::Deserialize;
use serde_json::json;

use crate::{CliError, CliResult, Ctx, SeedArg};

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("tasks").required(true).args(["battery", "task_spec"])))]
pub struct TrainArgs {
    /// Named task battery; only `default` exists.
    #[arg(long)]
    battery: Option<String>,
    /// TOML file with one or more `[[task]]` tables.
    #[arg(long, value_name = "FILE")]
    task_spec: Option<PathBuf>,
    /// Comma-separated methods: soka, lora, pissa, full, kron-random.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size; full batch when omitted.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Heavy-ball momentum coefficient; plain gradient descent when omitted.
    #[arg(long)]
    momentum: Option<f64>,
    /// Energy threshold for the shared adapter rank.
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory for logs, comparison and curves.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    task: Vec<TaskSpec>,
}

fn load_task_file(path: &Path) -> CliResult<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| kronadapt::Error::io(path, e))?;
    let file: TaskFile = toml::from_str(&text).map_err(|e| {
        CliError::argument(format!("task spec {}: {}", path.display(), e.message()))
    })?;
    if file.task.is_empty() {
        return Err(CliError::argument(format!(
            "task spec {} lists no tasks",
            path.display()
        )));
    }
    Ok(file.task)
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn run(ctx: &Ctx, args: TrainArgs) -> CliResult {
    let cfg = &ctx.config.train;
    let seed = args.seed.resolve(&ctx.config)?;
    let methods: Vec<Method> = if !args.method.is_empty() {
        args.method.clone()
    } else if let Some(names) = &cfg.methods {
        names
            .iter()
            .map(|s| s.parse())
            .collect::<kronadapt::Result<_>>()?
    } else {
        Method::STANDARD.to_vec()
    };
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = methods.iter().find(|m| !seen.insert(**m)) {
        return Err(CliError::argument(format!("method {dup} listed twice")));
    }
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        steps: args.steps.or(cfg.steps).unwrap_or(defaults.steps),
        learning_rate: args.lr.or(cfg.lr).unwrap_or(defaults.learning_rate),
        batch_size: args.batch_size.or(cfg.batch_size),
        optimizer: match args.momentum.or(cfg.momentum) {
            Some(beta) => Optimizer::Momentum { beta },
            None => Optimizer::Gd,
        },
        seed,
    };
    config.validate()?;
    let policy = match args.tau.or(cfg.tau) {
        Some(tau) => RankPolicy::with_tau(tau),
        None => RankPolicy::default(),
    };
    policy.validate()?;

    let specs = match (&args.battery, &args.task_spec) {
        (Some(name), None) if name == "default" => default_battery(),
        (Some(name), None) => {
            return Err(CliError::argument(format!(
                "unknown battery {name:?} (expected default)"
            )))
        }
        (None, Some(path)) => load_task_file(path)?,
        _ => unreachable!("clap enforces exactly one task source"),
    };

    let outcomes = run_battery(&specs, &methods, &policy, &config)?;

    let out = &args.out;
    for sub in ["logs", "curves"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| kronadapt::Error::io(&d, e))?;
    }
    let mut diverged = Vec::new();
    let mut rows = Vec::new();
    for o in &outcomes {
        let task = o.task.id();
        for log in &o.logs {
            let stem = file_stem(&format!("{task}.{}", log.method));
            write_atomic(
                &out.join("logs").join(format!("{stem}.csv")),
                train_log_csv(log).as_bytes(),
            )?;
            write_atomic(
                &out.join("logs").join(format!("{stem}.json")),
                train_log_json(log).as_bytes(),
            )?;
            if let RunStatus::Diverged { step } = log.status {
                diverged.push(format!("{task}/{} at step {step}", log.method));
            }
            ctx.say(format!(
                "{task:28} {:12} rank={:<3} params={:<6} final_loss={} {}",
                log.method.as_str(),
                log.rank,
                log.trainable_params,
                fmt17(log.final_loss),
                if log.succeeded() { "ok" } else { "diverged" }
            ));
            rows.push(json!({
                "task": task,
                "method": log.method.as_str(),
                "rank": log.rank,
                "trainable_params": log.trainable_params,
                "final_loss": fmt17(log.final_loss),
                "diverged": !log.succeeded(),
            }));
        }
        write_atomic(
            &out.join("curves").join(format!("{}.csv", file_stem(&task))),
            curves_csv(&task, &o.logs).as_bytes(),
        )?;
    }
    let reports: Vec<_> = outcomes.iter().map(|o| o.comparison.clone()).collect();
    write_atomic(
        &out.join("comparison.csv"),
        comparison_csv(&reports).as_bytes(),
    )?;
    write_atomic(
        &out.join("comparison.json"),
        comparison_json(&reports).as_bytes(),
    )?;
    ctx.emit_json(&json!({ "runs": rows, "out": out.display().to_string() }));

    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "{} run(s) diverged: {}",
            diverged.len(),
            diverged.join(", ")
        )))
    }
}

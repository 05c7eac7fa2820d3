use std::path::PathBuf;

use clap::Args;
use kronadapt::io::{load_checkpoint, read_manifest, Checkpoint, CheckpointState};
use kronadapt::rank::energy_curve;
use kronadapt::report::fmt17;
use kronadapt::rng::{gaussian_matrix, seeded};
use kronadapt::Adapter;
use serde_json::{json, Value};

use crate::{out, CliError, CliResult, Ctx};

/// Probe batch for the forward check; fixed so `--verify` is reproducible.
const PROBE_SEED: u64 = 0x1ec7;
const PROBE_COLUMNS: usize = 8;
const FORWARD_TOL: f64 = 1e-9;
const ENERGY_TOL: f64 = 1e-8;
const FACTOR_TOL: f64 = 1e-9;

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Dump the stored singular values and cumulative energy curve.
    #[arg(long)]
    spectrum: bool,
    /// Recompute initialization and merge/forward consistency checks.
    #[arg(long)]
    verify: bool,
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> Check {
    Check {
        name,
        pass: err <= tol,
        detail: format!("error={} tol={}", fmt17(err), fmt17(tol)),
    }
}

fn verify(ckpt: &Checkpoint) -> kronadapt::Result<Vec<Check>> {
    let adapter = &ckpt.adapter;
    let mut checks = Vec::new();

    let x = gaussian_matrix(adapter.in_dim(), PROBE_COLUMNS, &mut seeded(PROBE_SEED));
    let merged = adapter.merge();
    let dense = merged.matmul(&x)?;
    let fwd = adapter.forward(&x)?;
    let rel = fwd.sub(&dense)?.frobenius_norm() / dense.frobenius_norm().max(f64::MIN_POSITIVE);
    checks.push(check("merge-forward", rel, FORWARD_TOL));

    if ckpt.state != CheckpointState::Init {
        return Ok(checks);
    }
    // Energy identities: at init, merge = W and base = W minus the retained
    // part, so their squared norms split the stored spectrum.
    let energy_checks = |checks: &mut Vec<Check>, s: &[f64], r: usize, base_sq: f64| {
        let total: f64 = s.iter().map(|v| v * v).sum();
        let tail: f64 = s.iter().skip(r).map(|v| v * v).sum();
        let scale = total.max(f64::MIN_POSITIVE);
        checks.push(check(
            "residual-energy",
            (base_sq - tail).abs() / scale,
            ENERGY_TOL,
        ));
        checks.push(check(
            "total-energy",
            (merged.frobenius_norm_sq() - total).abs() / scale,
            ENERGY_TOL,
        ));
    };
    match adapter {
        Adapter::Soka(a) => {
            let s = ckpt.spectrum.clone().unwrap_or_default();
            let s0 = s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
            let sigma_err = a
                .terms
                .iter()
                .enumerate()
                .map(|(k, t)| (t.sigma - s.get(k).copied().unwrap_or(f64::NAN)).abs() / s0)
                .fold(0.0, f64::max);
            checks.push(check("sigma-spectrum", sigma_err, FACTOR_TOL));
            let norm_err = a
                .terms
                .iter()
                .flat_map(|t| [t.u.frobenius_norm(), t.v.frobenius_norm()])
                .map(|n| (n - 1.0).abs())
                .fold(0.0, f64::max);
            checks.push(check("unit-factors", norm_err, FACTOR_TOL));
            energy_checks(&mut checks, &s, a.rank(), a.base.frobenius_norm_sq());
        }
        Adapter::Pissa(a) => {
            if let Some(s) = &ckpt.spectrum {
                energy_checks(&mut checks, s, a.rank(), a.base.frobenius_norm_sq());
            }
        }
        Adapter::Lora(a) => {
            let max_b = a.b.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            checks.push(Check {
                name: "zero-update",
                pass: max_b == 0.0,
                detail: format!("max|B|={}", fmt17(max_b)),
            });
        }
        Adapter::Full(_) => {}
    }
    Ok(checks)
}

pub fn run(ctx: &Ctx, args: InspectArgs) -> CliResult {
    let manifest = read_manifest(&args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let adapter = &ckpt.adapter;
    let cost = adapter.cost_report();

    let mut doc = json!({
        "kind": manifest.kind,
        "state": manifest.state,
        "rows": manifest.rows,
        "cols": manifest.cols,
        "rank": manifest.rank,
        "trainable_params": cost.trainable_params,
    });
    let mut line = format!(
        "kind={} state={} rows={} cols={} rank={} trainable_params={}",
        manifest.kind,
        match manifest.state {
            CheckpointState::Init => "init",
            CheckpointState::Trained => "trained",
        },
        manifest.rows,
        manifest.cols,
        manifest.rank,
        cost.trainable_params
    );
    if let Some(shape) = manifest.shape {
        line.push_str(&format!(" shape={shape}"));
        doc["shape"] = json!(shape.to_string());
    }
    if let Some(d) = &manifest.rank_decision {
        line.push_str(&format!(
            " mode={} r_energy={} r_elbow={} r_final={} clamped={}",
            d.mode.as_str(),
            d.r_energy,
            d.r_elbow,
            d.r_final,
            d.clamped
        ));
        doc["rank_decision"] = serde_json::to_value(d).expect("summary serializes");
    }
    if let Some(p) = &manifest.policy {
        line.push_str(&format!(" tau={}", p.tau));
        doc["tau"] = json!(p.tau);
    }
    ctx.say(line);

    if args.spectrum {
        let s = ckpt.spectrum.clone().unwrap_or_default();
        let e = energy_curve(&s);
        if ctx.json {
            doc["spectrum"] = json!(s);
            doc["energy_curve"] = json!(e);
        } else {
            out("");
            out("k,sigma,energy");
            for (k, (sv, ev)) in s.iter().zip(&e).enumerate() {
                out(format!("{},{},{}", k + 1, fmt17(*sv), fmt17(*ev)));
            }
        }
    }

    let mut failed = Vec::new();
    if args.verify {
        let checks = verify(&ckpt)?;
        for c in &checks {
            ctx.say(format!(
                "check {}: {} ({})",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.detail
            ));
            if !c.pass {
                failed.push(c.name);
            }
        }
        doc["checks"] = Value::Array(
            checks
                .iter()
                .map(|c| json!({ "name": c.name, "pass": c.pass, "detail": c.detail }))
                .collect(),
        );
    }
    ctx.emit_json(&doc);

    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verify(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

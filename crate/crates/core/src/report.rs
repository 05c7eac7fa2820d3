//! CSV and JSON renderings of rank decisions, cost reports, training logs
//! and comparisons.
//!
//! Both encodings of a report carry the same values. Floats are written with
//! 17 significant digits (`{:.16e}`), enough to round-trip any `f64`.
//! Non-finite values are written as `NaN`, `inf` or `-inf` (JSON strings).
//!
//! CSV headers:
//!
//! * rank decision: `k,sigma,energy,gap,r_energy,r_elbow,r_final,clamped,mode,tau,r_min,r_max`
//!   (one row per component; `gap` is empty on the last row, `r_max` empty
//!   when unbounded)
//! * cost: `label,rank,trainable_params,matvec_flops,dense_equivalent_flops`
//! * training log: `task,method,step,loss,grad_norm`
//! * comparison: `task,method,steps,trainable_params,loss_q0,loss_q25,loss_q50,loss_q75,loss_q100,auc,max_grad_norm,final_loss,auc_diff,final_loss_diff,diverged`

use std::fmt::Write as _;

use serde::ser::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::adapter::CostReport;
use crate::rank::RankDecision;
use crate::toybench::{ComparisonReport, TrainLog};

/// `f64` serialized with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F17(pub f64);

pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.16e}")
    }
}

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            let raw = RawValue::from_string(fmt17(self.0)).map_err(serde::ser::Error::custom)?;
            raw.serialize(s)
        } else {
            s.serialize_str(&fmt17(self.0))
        }
    }
}

fn f17s(v: &[f64]) -> Vec<F17> {
    v.iter().copied().map(F17).collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types always serialize");
    s.push('\n');
    s
}

#[derive(serde::Serialize)]
struct RankDecisionDoc {
    report: &'static str,
    mode: &'static str,
    tau: F17,
    r_min: usize,
    r_max: Option<usize>,
    r_energy: usize,
    r_elbow: usize,
    r_final: usize,
    clamped: bool,
    spectrum: Vec<F17>,
    energy_curve: Vec<F17>,
    gaps: Vec<F17>,
}

pub fn rank_decision_json(d: &RankDecision) -> String {
    to_json(&RankDecisionDoc {
        report: "rank_decision",
        mode: d.mode.as_str(),
        tau: F17(d.policy.tau),
        r_min: d.policy.r_min,
        r_max: d.policy.r_max,
        r_energy: d.r_energy,
        r_elbow: d.r_elbow,
        r_final: d.r_final,
        clamped: d.clamped,
        spectrum: f17s(&d.spectrum),
        energy_curve: f17s(&d.energy_curve),
        gaps: f17s(&d.gaps),
    })
}

pub const RANK_DECISION_HEADER: &str =
    "k,sigma,energy,gap,r_energy,r_elbow,r_final,clamped,mode,tau,r_min,r_max";

pub fn rank_decision_csv(d: &RankDecision) -> String {
    let mut out = String::from(RANK_DECISION_HEADER);
    out.push('\n');
    let r_max = d.policy.r_max.map_or(String::new(), |r| r.to_string());
    for (k, (&s, &e)) in d.spectrum.iter().zip(&d.energy_curve).enumerate() {
        let gap = d.gaps.get(k).map_or(String::new(), |&g| fmt17(g));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            k + 1,
            fmt17(s),
            fmt17(e),
            gap,
            d.r_energy,
            d.r_elbow,
            d.r_final,
            d.clamped,
            d.mode.as_str(),
            fmt17(d.policy.tau),
            d.policy.r_min,
            r_max
        )
        .unwrap();
    }
    out
}

/// One labelled row of a cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEntry {
    pub label: String,
    pub rank: usize,
    pub cost: CostReport,
}

#[derive(serde::Serialize)]
struct CostEntryDoc<'a> {
    label: &'a str,
    rank: usize,
    trainable_params: u64,
    matvec_flops: u64,
    dense_equivalent_flops: u64,
}

pub const COST_HEADER: &str = "label,rank,trainable_params,matvec_flops,dense_equivalent_flops";

pub fn cost_csv(entries: &[CostEntry]) -> String {
    let mut out = String::from(COST_HEADER);
    out.push('\n');
    for e in entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.label,
            e.rank,
            e.cost.trainable_params,
            e.cost.matvec_flops,
            e.cost.dense_equivalent_flops
        )
        .unwrap();
    }
    out
}

pub fn cost_json(entries: &[CostEntry]) -> String {
    #[derive(serde::Serialize)]
    struct Doc<'a> {
        report: &'static str,
        entries: Vec<CostEntryDoc<'a>>,
    }
    to_json(&Doc {
        report: "cost",
        entries: entries
            .iter()
            .map(|e| CostEntryDoc {
                label: &e.label,
                rank: e.rank,
                trainable_params: e.cost.trainable_params,
                matvec_flops: e.cost.matvec_flops,
                dense_equivalent_flops: e.cost.dense_equivalent_flops,
            })
            .collect(),
    })
}

pub const TRAIN_LOG_HEADER: &str = "task,method,step,loss,grad_norm";

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in &log.records {
        writeln!(
            out,
            "{},{},{},{},{}",
            log.task,
            log.method,
            r.step,
            fmt17(r.loss),
            fmt17(r.grad_norm)
        )
        .unwrap();
    }
    out
}

pub fn train_log_json(log: &TrainLog) -> String {
    #[derive(serde::Serialize)]
    struct Rec {
        step: usize,
        loss: F17,
        grad_norm: F17,
    }
    #[derive(serde::Serialize)]
    struct Doc<'a> {
        report: &'static str,
        task: &'a str,
        method: &'static str,
        rank: usize,
        trainable_params: u64,
        status: &'static str,
        diverged_at: Option<usize>,
        final_loss: F17,
        factor_norm_drift: Option<F17>,
        snapshot: Option<&'a str>,
        records: Vec<Rec>,
    }
    let diverged_at = match log.status {
        crate::toybench::RunStatus::Completed => None,
        crate::toybench::RunStatus::Diverged { step } => Some(step),
    };
    to_json(&Doc {
        report: "train_log",
        task: &log.task,
        method: log.method.as_str(),
        rank: log.rank,
        trainable_params: log.trainable_params,
        status: if diverged_at.is_some() {
            "diverged"
        } else {
            "completed"
        },
        diverged_at,
        final_loss: F17(log.final_loss),
        factor_norm_drift: log.factor_norm_drift.map(F17),
        snapshot: log.snapshot.as_deref(),
        records: log
            .records
            .iter()
            .map(|r| Rec {
                step: r.step,
                loss: F17(r.loss),
                grad_norm: F17(r.grad_norm),
            })
            .collect(),
    })
}

pub const COMPARISON_HEADER: &str = "task,method,steps,trainable_params,loss_q0,loss_q25,loss_q50,loss_q75,loss_q100,auc,max_grad_norm,final_loss,auc_diff,final_loss_diff,diverged";

/// CSV rows for several comparisons share one header.
pub fn comparison_csv(reports: &[ComparisonReport]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for rep in reports {
        for m in &rep.methods {
            let q: Vec<String> = m.loss_at_quantiles.iter().map(|&v| fmt17(v)).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                rep.task,
                m.method,
                m.steps,
                m.trainable_params,
                q.join(","),
                fmt17(m.auc),
                fmt17(m.max_grad_norm),
                fmt17(m.final_loss),
                fmt17(m.auc_diff),
                fmt17(m.final_loss_diff),
                m.diverged
            )
            .unwrap();
        }
    }
    out
}

pub fn comparison_json(reports: &[ComparisonReport]) -> String {
    #[derive(serde::Serialize)]
    struct Method {
        method: &'static str,
        steps: usize,
        trainable_params: u64,
        loss_at_quantiles: Vec<F17>,
        auc: F17,
        max_grad_norm: F17,
        final_loss: F17,
        auc_diff: F17,
        final_loss_diff: F17,
        diverged: bool,
    }
    #[derive(serde::Serialize)]
    struct Task<'a> {
        task: &'a str,
        reference: &'static str,
        methods: Vec<Method>,
    }
    #[derive(serde::Serialize)]
    struct Doc<'a> {
        report: &'static str,
        quantiles: Vec<F17>,
        tasks: Vec<Task<'a>>,
    }
    to_json(&Doc {
        report: "comparison",
        quantiles: f17s(&crate::toybench::QUANTILES),
        tasks: reports
            .iter()
            .map(|rep| Task {
                task: &rep.task,
                reference: rep.reference.as_str(),
                methods: rep
                    .methods
                    .iter()
                    .map(|m| Method {
                        method: m.method.as_str(),
                        steps: m.steps,
                        trainable_params: m.trainable_params,
                        loss_at_quantiles: f17s(&m.loss_at_quantiles),
                        auc: F17(m.auc),
                        max_grad_norm: F17(m.max_grad_norm),
                        final_loss: F17(m.final_loss),
                        auc_diff: F17(m.auc_diff),
                        final_loss_diff: F17(m.final_loss_diff),
                        diverged: m.diverged,
                    })
                    .collect(),
            })
            .collect(),
    })
}

/// Columnar curves for plotting: `task,step,<method>_loss,<method>_grad_norm,...`.
/// Logs must share the step count; missing steps of diverged runs are left
/// empty.
pub fn curves_csv(task: &str, logs: &[TrainLog]) -> String {
    let mut out = String::from("task,step");
    for log in logs {
        write!(out, ",{m}_loss,{m}_grad_norm", m = log.method).unwrap();
    }
    out.push('\n');
    let steps = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    for step in 0..steps {
        write!(out, "{task},{step}").unwrap();
        for log in logs {
            match log.records.get(step) {
                Some(r) => write!(out, ",{},{}", fmt17(r.loss), fmt17(r.grad_norm)).unwrap(),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

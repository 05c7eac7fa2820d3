//! Working-rank selection from a singular-value spectrum.
//!
//! Two criteria are combined: the smallest `k` whose cumulative energy
//! fraction reaches `tau`, and the position of the largest successive gap.
//! The working rank is the smaller of the two, clamped to user bounds.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// How successive gaps are measured for the elbow criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMetric {
    /// `σ_i − σ_{i+1}`
    #[default]
    Raw,
    /// `ln σ_i − ln σ_{i+1}` (opt-in).
    Log,
}

impl std::str::FromStr for GapMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GapMetric::Raw),
            "log" => Ok(GapMetric::Log),
            other => Err(arg_err!(
                "unknown gap metric {other:?} (expected raw or log)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub tau: f64,
    pub r_min: usize,
    /// `None` means unbounded.
    pub r_max: Option<usize>,
    #[serde(default)]
    pub gap: GapMetric,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            tau: 0.95,
            r_min: 1,
            r_max: None,
            gap: GapMetric::Raw,
        }
    }
}

impl RankPolicy {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(arg_err!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.r_min == 0 {
            return Err(arg_err!("r_min must be positive"));
        }
        if let Some(r_max) = self.r_max {
            if r_max < self.r_min {
                return Err(arg_err!("r_max {r_max} is below r_min {}", self.r_min));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Dynamic,
    Manual,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::Dynamic => "dynamic",
            SelectionMode::Manual => "manual",
        }
    }
}

/// Audit trail of one rank selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub mode: SelectionMode,
    pub policy: RankPolicy,
    pub spectrum: Vec<f64>,
    /// `E(k)` for `k = 1..=len`.
    pub energy_curve: Vec<f64>,
    /// `δ_i` for `i = 1..len`.
    pub gaps: Vec<f64>,
    pub r_energy: usize,
    pub r_elbow: usize,
    pub r_final: usize,
    pub clamped: bool,
}

fn check_spectrum(spectrum: &[f64]) -> Result<()> {
    if spectrum.is_empty() {
        return Err(arg_err!("spectrum is empty"));
    }
    if let Some(x) = spectrum.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(arg_err!(
            "spectrum entries must be finite and nonnegative, found {x}"
        ));
    }
    if let Some(i) = spectrum.windows(2).position(|w| w[1] > w[0]) {
        return Err(arg_err!(
            "spectrum is not nonincreasing at index {}: {} < {}",
            i + 1,
            spectrum[i],
            spectrum[i + 1]
        ));
    }
    Ok(())
}

/// Cumulative energy fractions `E(k)`. The last entry is pinned to exactly
/// 1. An all-zero spectrum yields all zeros.
pub fn energy_curve(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return vec![0.0; spectrum.len()];
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = spectrum
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    curve
}

pub fn gaps(spectrum: &[f64], metric: GapMetric) -> Vec<f64> {
    spectrum
        .windows(2)
        .map(|w| match metric {
            GapMetric::Raw => w[0] - w[1],
            GapMetric::Log => {
                if w[0] == w[1] {
                    0.0
                } else {
                    w[0].ln() - w[1].ln()
                }
            }
        })
        .collect()
}

/// Smallest `k` (1-based) with `E(k) >= tau`.
pub fn energy_rank(spectrum: &[f64], tau: f64) -> Result<usize> {
    check_spectrum(spectrum)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(arg_err!("tau must lie in (0, 1), got {tau}"));
    }
    let curve = energy_curve(spectrum);
    if curve.last() == Some(&0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    Ok(first_reaching(&curve, tau))
}

fn first_reaching(curve: &[f64], tau: f64) -> usize {
    curve
        .iter()
        .position(|&e| e >= tau)
        .map_or(curve.len(), |i| i + 1)
}

/// 1-based index of the largest raw gap, smallest index on ties. A single
/// value has rank 1.
pub fn elbow_rank(spectrum: &[f64]) -> Result<usize> {
    elbow_rank_with(spectrum, GapMetric::Raw)
}

pub fn elbow_rank_with(spectrum: &[f64], metric: GapMetric) -> Result<usize> {
    check_spectrum(spectrum)?;
    Ok(argmax_first(&gaps(spectrum, metric)) + 1)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Working rank `clamp(min(r_energy, r_elbow), r_min, min(r_max, len))`.
///
/// An all-zero spectrum selects `r_min` and reports `clamped`.
pub fn select_rank(spectrum: &[f64], policy: &RankPolicy) -> Result<RankDecision> {
    policy.validate()?;
    check_spectrum(spectrum)?;
    let len = spectrum.len();
    if policy.r_min > len {
        return Err(arg_err!(
            "r_min {} exceeds the {len} available components",
            policy.r_min
        ));
    }
    let upper = policy.r_max.map_or(len, |r| r.min(len));
    let energy = energy_curve(spectrum);
    let gap_values = gaps(spectrum, policy.gap);

    let degenerate = energy.last() == Some(&0.0);
    let (r_energy, r_elbow, r_final, clamped) = if degenerate {
        (policy.r_min, policy.r_min, policy.r_min, true)
    } else {
        let r_energy = first_reaching(&energy, policy.tau);
        let r_elbow = argmax_first(&gap_values) + 1;
        let raw = r_energy.min(r_elbow);
        let r_final = raw.clamp(policy.r_min, upper);
        (r_energy, r_elbow, r_final, r_final != raw)
    };

    Ok(RankDecision {
        mode: SelectionMode::Dynamic,
        policy: *policy,
        spectrum: spectrum.to_vec(),
        energy_curve: energy,
        gaps: gap_values,
        r_energy,
        r_elbow,
        r_final,
        clamped,
    })
}

/// Record a user-fixed rank. Both criteria are still evaluated for the audit
/// trail.
pub fn manual_rank(spectrum: &[f64], rank: usize, policy: &RankPolicy) -> Result<RankDecision> {
    check_spectrum(spectrum)?;
    if rank == 0 || rank > spectrum.len() {
        return Err(arg_err!("rank {rank} outside 1..={}", spectrum.len()));
    }
    let relaxed = RankPolicy {
        r_min: 1,
        r_max: None,
        ..*policy
    };
    let mut decision = select_rank(spectrum, &relaxed)?;
    decision.mode = SelectionMode::Manual;
    decision.policy = *policy;
    decision.r_final = rank;
    decision.clamped = false;
    Ok(decision)
}

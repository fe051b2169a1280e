//! Gradient-flow and gate-behavior statistics computed from a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diagnostics::trace::TrainingTrace;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Which gate-gradient norm the gap compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSignal {
    /// Gradients as produced by backpropagation.
    Raw,
    /// Gradients after equilibrium rescaling.
    Applied,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Statistics of `log10(prompt / gate)` over pairs where both norms are
/// positive.
pub fn gap_stats(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<GapStats> {
    let mut gaps = Vec::new();
    let mut excluded = 0;
    for (prompt, gate) in pairs {
        if gate > 0.0 && prompt > 0.0 {
            gaps.push((prompt / gate).log10());
        } else {
            excluded += 1;
        }
    }
    if gaps.is_empty() {
        return Err(LabError::NoGateSignal);
    }
    Ok(GapStats {
        mean: mean(&gaps),
        std: std_dev(&gaps),
        median: median(&gaps),
        included: gaps.len(),
        excluded,
    })
}

/// Per-step magnitude gap between prompt and raw gate gradients.
pub fn magnitude_gap(trace: &TrainingTrace) -> Result<GapStats> {
    magnitude_gap_of(trace, GateSignal::Raw)
}

pub fn magnitude_gap_of(trace: &TrainingTrace, signal: GateSignal) -> Result<GapStats> {
    if trace.is_empty() {
        return Err(LabError::ShortTrace("no step records".into()));
    }
    gap_stats(trace.records.iter().map(|r| {
        let gate = match signal {
            GateSignal::Raw => r.grad_norm.gate_total(),
            GateSignal::Applied => r.grad_norm.gate_applied,
        };
        (r.grad_norm.prompt, gate)
    }))
}

/// Fraction of consecutive vectors with a negative inner product.
pub fn cancellation_rate_of<V: AsRef<[f64]>>(vectors: &[V]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(LabError::ShortTrace(format!(
            "cancellation needs at least 2 steps, got {}",
            vectors.len()
        )));
    }
    let reversals = vectors
        .windows(2)
        .filter(|w| {
            let (a, b) = (w[0].as_ref(), w[1].as_ref());
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() < 0.0
        })
        .count();
    Ok(reversals as f64 / (vectors.len() - 1) as f64)
}

/// Cancellation rate of a named gate group (`length`, `depth`, `gate-net`).
pub fn cancellation_rate(trace: &TrainingTrace, group: &str) -> Result<f64> {
    let (offset, len) = trace
        .gate_group(group)
        .ok_or_else(|| LabError::invalid(format!("trace has no gate group `{group}`")))?;
    let slices: Vec<&[f64]> = trace
        .records
        .iter()
        .map(|r| {
            r.gate_grad
                .get(offset..offset + len)
                .ok_or_else(|| LabError::Shape(format!("step {} gate gradient is too short", r.step)))
        })
        .collect::<Result<_>>()?;
    cancellation_rate_of(&slices)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSeries {
    /// `l_eff[layer][t]`
    pub l_eff: Vec<Vec<f64>>,
    /// `depth[layer][t]`
    pub depth: Vec<Vec<f64>>,
}

fn transpose(rows: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for row in rows {
        if out.len() < row.len() {
            out.resize(row.len(), Vec::new());
        }
        for (series, v) in out.iter_mut().zip(row) {
            series.push(v);
        }
    }
    out
}

pub fn gate_behavior_series(trace: &TrainingTrace) -> GateSeries {
    GateSeries {
        l_eff: transpose(trace.records.iter().map(|r| r.l_eff.clone())),
        depth: transpose(trace.records.iter().map(|r| r.depth_act.clone())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub flatness: f64,
    pub drift: f64,
    pub gap: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            flatness: 0.01,
            drift: 0.02,
            gap: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Collapsed,
    Active,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Collapsed => "collapsed",
            Verdict::Active => "active",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseVerdict {
    /// Raw-gradient gap; absent when no step carries gate gradient.
    pub gap: Option<GapStats>,
    /// Gap against the rescaled gate gradients actually applied.
    pub applied_gap: Option<GapStats>,
    pub cancellation: BTreeMap<String, f64>,
    /// Largest per-layer std of the effective length over the final half,
    /// divided by the gated token count.
    pub flatness: f64,
    /// Largest `|w_d(t) - w_d(0)|`.
    pub drift: f64,
    /// Fraction of final activations outside `[0.05, 0.95]`.
    pub saturation: f64,
    pub thresholds: Thresholds,
    pub verdict: Verdict,
}

/// Classifies gate behavior over a trace spanning at least two epochs.
pub fn detect_collapse(trace: &TrainingTrace, thresholds: &Thresholds) -> Result<CollapseVerdict> {
    if trace.meta.gate_layout.is_empty() {
        return Err(LabError::NoGates);
    }
    let (first, last) = match (trace.records.first(), trace.records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(LabError::ShortTrace("no step records".into())),
    };
    if last.epoch == first.epoch {
        return Err(LabError::ShortTrace(format!(
            "trace covers only epoch {}; at least two epochs are needed",
            first.epoch
        )));
    }

    let series = gate_behavior_series(trace);
    let n_max = trace.meta.n_max.max(1) as f64;
    let flatness = series
        .l_eff
        .iter()
        .map(|s| std_dev(&s[s.len() / 2..]) / n_max)
        .fold(0.0, f64::max);
    let drift = series
        .depth
        .iter()
        .flat_map(|s| s.iter().map(move |w| (w - s[0]).abs()))
        .fold(0.0, f64::max);
    let finals: Vec<f64> = last.gate_act.iter().chain(&last.depth_act).copied().collect();
    let saturation = if finals.is_empty() {
        0.0
    } else {
        finals.iter().filter(|&&a| !(0.05..=0.95).contains(&a)).count() as f64 / finals.len() as f64
    };
    let optional = |r: Result<GapStats>| match r {
        Ok(s) => Ok(Some(s)),
        Err(LabError::NoGateSignal) => Ok(None),
        Err(e) => Err(e),
    };
    let gap = optional(magnitude_gap(trace))?;
    let applied_gap = optional(magnitude_gap_of(trace, GateSignal::Applied))?;
    let mut cancellation = BTreeMap::new();
    for slice in &trace.meta.gate_layout {
        cancellation.insert(slice.name.clone(), cancellation_rate(trace, &slice.name)?);
    }

    let flat = flatness < thresholds.flatness;
    let still = drift < thresholds.drift;
    let starved = gap.is_none_or(|g| g.mean > thresholds.gap);
    let verdict = if flat && still && starved {
        Verdict::Collapsed
    } else if !flat && !still && !starved {
        Verdict::Active
    } else {
        Verdict::Inconclusive
    };
    Ok(CollapseVerdict {
        gap,
        applied_gap,
        cancellation,
        flatness,
        drift,
        saturation,
        thresholds: *thresholds,
        verdict,
    })
}

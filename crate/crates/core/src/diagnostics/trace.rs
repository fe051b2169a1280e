//! Per-step training records and their JSONL form.
//!
//! A trace file starts with a `{"run": ...}` header, continues with one step
//! record per line and may end with a `{"verdict": ...}` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnostics::metrics::CollapseVerdict;
use crate::error::{LabError, Result};
use crate::gating::GatingStrategy;
use crate::objective::LossBreakdown;
use crate::variant::{GateSlice, VariantKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub prompt: f64,
    pub gate: f64,
    pub coupling: f64,
    pub gate_net: f64,
    /// Gate and gate-net norm after equilibrium rescaling, before clipping.
    #[serde(default)]
    pub gate_applied: f64,
}

impl GradNorms {
    /// Combined raw norm of the gate and gate-net groups.
    pub fn gate_total(&self) -> f64 {
        self.gate.hypot(self.gate_net)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: GradNorms,
    /// Raw gate gradients flattened in the header's layout order.
    pub gate_grad: Vec<f64>,
    /// Applied length multipliers, layer by layer.
    pub gate_act: Vec<f64>,
    pub depth_act: Vec<f64>,
    pub l_eff: Vec<f64>,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub variant: VariantKind,
    pub strategy: GatingStrategy,
    pub config_hash: String,
    /// Length-gated tokens per layer.
    pub n_max: usize,
    pub gate_layout: Vec<GateSlice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTrace {
    pub meta: RunMeta,
    pub records: Vec<StepRecord>,
    pub verdict: Option<CollapseVerdict>,
}

impl TrainingTrace {
    pub fn new(meta: RunMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
            verdict: None,
        }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(LabError::invalid(format!(
                    "step {} recorded after step {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Offset and length of a named gate group inside `gate_grad`.
    pub fn gate_group(&self, name: &str) -> Option<(usize, usize)> {
        let mut offset = 0;
        for slice in &self.meta.gate_layout {
            if slice.name == name {
                return Some((offset, slice.len));
            }
            offset += slice.len;
        }
        None
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&serde_json::json!({ "run": self.meta }))?);
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        if let Some(v) = &self.verdict {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "verdict": v }))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses JSONL text. Errors name `origin` and the offending line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| LabError::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut meta = None;
        let mut records: Vec<StepRecord> = Vec::new();
        let mut verdict = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            if verdict.is_some() {
                return Err(err(line, "content after the verdict line".into()));
            }
            let value: Value = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
            let obj = value
                .as_object()
                .ok_or_else(|| err(line, "expected a JSON object".into()))?;
            if let Some(run) = obj.get("run") {
                if meta.is_some() || !records.is_empty() {
                    return Err(err(line, "run header must be the first line".into()));
                }
                meta = Some(serde_json::from_value(run.clone()).map_err(|e| err(line, e.to_string()))?);
            } else if let Some(v) = obj.get("verdict") {
                verdict = Some(serde_json::from_value(v.clone()).map_err(|e| err(line, e.to_string()))?);
            } else {
                if meta.is_none() {
                    return Err(err(line, "step record before the run header".into()));
                }
                let r: StepRecord = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
                if let Some(last) = records.last() {
                    if r.step <= last.step {
                        return Err(err(line, format!("step {} does not follow step {}", r.step, last.step)));
                    }
                }
                records.push(r);
            }
        }
        let meta = meta.ok_or_else(|| err(1, "missing run header".into()))?;
        Ok(Self { meta, records, verdict })
    }
}

//! SGD/AdamW with per-group learning rates and the gate-gradient repairs:
//! learning-rate multipliers, clipping, equilibrium rescaling, temperature
//! annealing, phased training and gate initialization schemes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use gatelab_autodiff::{sigmoid, GradientMap, ParamGroup, Parameter, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdaptiveMoment,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adaptive-moment" | "adamw" => Some(OptimizerKind::AdaptiveMoment),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdaptiveMoment => "adaptive-moment",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub enabled: bool,
    pub eps: f64,
    pub max_scale: f64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            eps: 1e-8,
            max_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: f64,
}

/// Groups trained during `[start, end)`; an open end runs to the last epoch.
/// Serialized as `start..end:group,group`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub start: usize,
    pub end: Option<usize>,
    pub groups: Vec<ParamGroup>,
}

impl Phase {
    /// Warm-up on prompts and coupling, gate-only adaptation, then joint.
    pub fn default_schedule() -> Vec<Phase> {
        vec![
            Phase {
                start: 0,
                end: Some(2),
                groups: vec![ParamGroup::Prompt, ParamGroup::Coupling],
            },
            Phase {
                start: 2,
                end: Some(4),
                groups: vec![ParamGroup::Gate, ParamGroup::GateNet],
            },
            Phase {
                start: 4,
                end: None,
                groups: ParamGroup::ALL.to_vec(),
            },
        ]
    }

    fn contains(&self, epoch: usize) -> bool {
        epoch >= self.start && self.end.is_none_or(|e| epoch < e)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: Vec<&str> = self.groups.iter().map(|g| g.as_str()).collect();
        match self.end {
            Some(e) => write!(f, "{}..{}:{}", self.start, e, groups.join(",")),
            None => write!(f, "{}..:{}", self.start, groups.join(",")),
        }
    }
}

impl FromStr for Phase {
    type Err = LabError;

    /// Parses `start..end:group,group` or `start..:all`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::BadValue {
            key: "optimizer.phases".into(),
            reason: format!("cannot parse phase `{s}`; expected `start..end:group,group`"),
        };
        let (range, groups) = s.split_once(':').ok_or_else(bad)?;
        let (start, end) = range.split_once("..").ok_or_else(bad)?;
        let start = start.trim().parse().map_err(|_| bad())?;
        let end = match end.trim() {
            "" => None,
            e => Some(e.parse().map_err(|_| bad())?),
        };
        let groups = if groups.trim() == "all" {
            ParamGroup::ALL.to_vec()
        } else {
            groups
                .split(',')
                .map(|g| ParamGroup::parse(g.trim()).ok_or_else(bad))
                .collect::<Result<_>>()?
        };
        Ok(Phase { start, end, groups })
    }
}

impl Serialize for Phase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightDecay {
    pub prompt: f64,
    pub gate: f64,
    pub coupling: f64,
    pub gate_net: f64,
}

impl Default for WeightDecay {
    fn default() -> Self {
        Self {
            prompt: 5e-4,
            gate: 5e-4,
            coupling: 5e-4,
            gate_net: 5e-4,
        }
    }
}

impl WeightDecay {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Prompt => self.prompt,
            ParamGroup::Gate => self.gate,
            ParamGroup::Coupling => self.coupling,
            ParamGroup::GateNet => self.gate_net,
            ParamGroup::Backbone => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    /// Applied to both the gate and gate-net groups.
    pub gate_lr_multiplier: f64,
    pub clip_max_norm: Option<f64>,
    pub weight_decay: WeightDecay,
    pub equilibrium: EquilibriumConfig,
    pub temperature: Option<TemperatureSchedule>,
    pub phases: Option<Vec<Phase>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            base_lr: 0.0035,
            gate_lr_multiplier: 1.0,
            clip_max_norm: None,
            weight_decay: WeightDecay::default(),
            equilibrium: EquilibriumConfig::default(),
            temperature: None,
            phases: None,
            epochs: 13,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(LabError::BadValue {
                key: format!("optimizer.{key}"),
                reason,
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.base_lr) {
            return bad("base_lr", format!("{} must be positive", self.base_lr));
        }
        if !positive(self.gate_lr_multiplier) {
            return bad("gate_lr_multiplier", format!("{} must be positive", self.gate_lr_multiplier));
        }
        if let Some(c) = self.clip_max_norm {
            if !positive(c) {
                return bad("clip_max_norm", format!("{c} must be positive"));
            }
        }
        for (k, v) in [
            ("prompt", self.weight_decay.prompt),
            ("gate", self.weight_decay.gate),
            ("coupling", self.weight_decay.coupling),
            ("gate_net", self.weight_decay.gate_net),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("weight_decay.{k}"), format!("{v} must be non-negative"));
            }
        }
        if !positive(self.equilibrium.eps) {
            return bad("equilibrium.eps", "must be positive".into());
        }
        if !(self.equilibrium.max_scale >= 1.0 && self.equilibrium.max_scale.is_finite()) {
            return bad("equilibrium.max_scale", "must be at least 1".into());
        }
        if let Some(t) = &self.temperature {
            if !positive(t.start) || !positive(t.end) {
                return bad("temperature", "temperatures must be positive".into());
            }
            if !(t.epochs >= 0.0 && t.epochs.is_finite()) {
                return bad("temperature.epochs", "must be non-negative".into());
            }
        }
        if let Some(phases) = &self.phases {
            if phases.is_empty() {
                return bad("phases", "phase list is empty".into());
            }
            for p in phases {
                if p.end.is_some_and(|e| e <= p.start) {
                    return bad("phases", format!("phase `{p}` is empty"));
                }
            }
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.adam_eps) {
            return bad("beta1", "moment parameters out of range".into());
        }
        Ok(())
    }

    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Gate | ParamGroup::GateNet => self.base_lr * self.gate_lr_multiplier,
            _ => self.base_lr,
        }
    }

    /// Groups updated during `epoch`.
    pub fn active_groups(&self, epoch: usize) -> Vec<ParamGroup> {
        match &self.phases {
            None => ParamGroup::ALL.to_vec(),
            Some(phases) => {
                let mut out: Vec<ParamGroup> = phases
                    .iter()
                    .filter(|p| p.contains(epoch))
                    .flat_map(|p| p.groups.iter().copied())
                    .collect();
                out.sort_by_key(|g| g.as_str());
                out.dedup();
                out
            }
        }
    }
}

/// Capped inverse of the sigmoid derivative times `raw`.
pub fn equilibrium_scale(gate_logit: f64, raw_grad: f64, cfg: &EquilibriumConfig) -> f64 {
    equilibrium_factor(gate_logit, cfg) * raw_grad
}

pub fn equilibrium_factor(gate_logit: f64, cfg: &EquilibriumConfig) -> f64 {
    let s = sigmoid(gate_logit);
    (1.0 / (s * (1.0 - s) + cfg.eps)).min(cfg.max_scale)
}

/// Rescales every gradient so the global norm is at most `max_norm`.
///
/// Norms within a relative 1e-12 of the cap count as inside it, so a clipped
/// map passes through a second clip unchanged.
pub fn clip_gradients(grads: &mut GradientMap, max_norm: f64) -> bool {
    let norm = grads.global_norm();
    if norm > max_norm * (1.0 + 1e-12) {
        grads.scale(max_norm / norm);
        true
    } else {
        false
    }
}

/// Linear interpolation from `start` to `end` over the schedule, constant
/// afterwards.
pub fn anneal_temperature(epoch: f64, schedule: &TemperatureSchedule) -> f64 {
    if schedule.epochs <= 0.0 {
        return schedule.end;
    }
    let frac = (epoch / schedule.epochs).clamp(0.0, 1.0);
    schedule.start + (schedule.end - schedule.start) * frac
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GateInit {
    /// Every logit at 1.0.
    #[default]
    Ones,
    Zero,
    Uniform(f64, f64),
    /// Every logit at the given value.
    Biased(f64),
}

impl GateInit {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GateInit::Uniform(a, b) => a.is_finite() && b.is_finite() && a < b,
            GateInit::Biased(c) => c.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::BadValue {
                key: "variant.gate_init".into(),
                reason: format!("invalid gate initialization `{self}`"),
            })
        }
    }
}

impl fmt::Display for GateInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateInit::Ones => f.write_str("ones"),
            GateInit::Zero => f.write_str("zero"),
            GateInit::Uniform(a, b) => write!(f, "uniform({a},{b})"),
            GateInit::Biased(c) => write!(f, "biased({c})"),
        }
    }
}

impl FromStr for GateInit {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::BadValue {
            key: "variant.gate_init".into(),
            reason: format!("unknown gate initialization `{s}`"),
        };
        let s = s.trim();
        let args = |prefix: &str| -> Option<Vec<f64>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            inner.split(',').map(|v| v.trim().parse().ok()).collect()
        };
        let init = match s {
            "ones" => GateInit::Ones,
            "zero" => GateInit::Zero,
            _ => match (args("uniform"), args("biased")) {
                (Some(v), _) if v.len() == 2 => GateInit::Uniform(v[0], v[1]),
                (_, Some(v)) if v.len() == 1 => GateInit::Biased(v[0]),
                _ => return Err(bad()),
            },
        };
        init.validate()?;
        Ok(init)
    }
}

impl Serialize for GateInit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GateInit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Initial gate logits drawn from `rng`.
pub fn init_gates(kind: GateInit, n: usize, mut rng: ChaCha8Rng) -> Result<Vec<f64>> {
    kind.validate()?;
    Ok(match kind {
        GateInit::Ones => vec![1.0; n],
        GateInit::Zero => vec![0.0; n],
        GateInit::Biased(c) => vec![c; n],
        GateInit::Uniform(a, b) => (0..n).map(|_| rng.random_range(a..b)).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub active_groups: Vec<ParamGroup>,
    /// Learning rate applied per group name.
    pub lr: BTreeMap<String, f64>,
    /// Norm of the gate and gate-net gradients after equilibrium rescaling and
    /// before clipping.
    pub gate_norm_applied: f64,
    pub pre_clip_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update to `params`. Parameters without a gradient entry
    /// still receive weight decay when their group is active.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &GradientMap, epoch: usize) -> Result<StepReport> {
        let mut grads = grads.clone();
        for (name, entry) in grads.iter() {
            let p = params
                .iter()
                .find(|p| p.name() == name)
                .ok_or_else(|| LabError::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.value.shape() != entry.grad.shape() {
                return Err(LabError::Shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter has {:?}",
                    entry.grad.shape(),
                    p.value.shape()
                )));
            }
        }

        if self.cfg.equilibrium.enabled {
            for p in params.iter() {
                if p.group() != ParamGroup::Gate {
                    continue;
                }
                if let Some(g) = grads.get_mut(p.name()) {
                    for (gi, &logit) in g.data_mut().iter_mut().zip(p.value.data()) {
                        *gi = equilibrium_scale(logit, *gi, &self.cfg.equilibrium);
                    }
                }
            }
        }
        let gate_norm_applied =
            (grads.group_norm(ParamGroup::Gate).powi(2) + grads.group_norm(ParamGroup::GateNet).powi(2)).sqrt();

        let active = self.cfg.active_groups(epoch);
        grads.retain(|_, e| active.contains(&e.group));
        let pre_clip_norm = grads.global_norm();
        let clipped = match self.cfg.clip_max_norm {
            Some(max) => clip_gradients(&mut grads, max),
            None => false,
        };

        let mut report = StepReport {
            active_groups: active.clone(),
            gate_norm_applied,
            pre_clip_norm,
            clipped,
            ..Default::default()
        };
        for p in params.iter_mut() {
            if p.is_frozen() || !active.contains(&p.group()) {
                continue;
            }
            let group = p.group();
            let lr = self.cfg.group_lr(group);
            let wd = self.cfg.weight_decay.get(group);
            report.lr.insert(group.as_str().to_string(), lr);
            let zero;
            let grad = match grads.get(p.name()) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.value.shape());
                    &zero
                }
            };
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps);
                    let st = self.moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                        m: Tensor::zeros(p.value.shape()),
                        v: Tensor::zeros(p.value.shape()),
                        t: 0,
                    });
                    st.t += 1;
                    let (c1, c2) = (1.0 - b1.powi(st.t), 1.0 - b2.powi(st.t));
                    let data = p.value.data_mut();
                    let (m, v) = (st.m.data_mut(), st.v.data_mut());
                    for i in 0..data.len() {
                        let g = grad.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        data[i] -= lr * (update + wd * data[i]);
                    }
                }
            }
        }
        Ok(report)
    }
}

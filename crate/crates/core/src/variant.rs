//! Assembly of the prompt-learning variants and their forward pass.

use std::collections::BTreeMap;

use gatelab_autodiff::{GradientMap, Graph, ParamGroup, Parameter, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, EncoderConfig, FrozenEncoder, InsertWeight, Insertion};
use crate::error::{LabError, Result};
use crate::gating::{
    self, CouplingMap, CouplingMaps, GateMode, GateSet, GatingStrategy, MapKind, PromptStack,
};
use crate::objective;
use crate::optim::{init_gates, GateInit};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Maple,
    Bimaple,
    AdaptiveBimaple,
    Coop,
    CoopGated,
    Cocoop,
    CocoopGated,
    ParamMatched,
    AlwaysFrozen,
    ExplicitReg,
}

impl VariantKind {
    pub const ALL: [VariantKind; 10] = [
        VariantKind::Maple,
        VariantKind::Bimaple,
        VariantKind::AdaptiveBimaple,
        VariantKind::Coop,
        VariantKind::CoopGated,
        VariantKind::Cocoop,
        VariantKind::CocoopGated,
        VariantKind::ParamMatched,
        VariantKind::AlwaysFrozen,
        VariantKind::ExplicitReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Maple => "maple",
            VariantKind::Bimaple => "bimaple",
            VariantKind::AdaptiveBimaple => "adaptive-bimaple",
            VariantKind::Coop => "coop",
            VariantKind::CoopGated => "coop-gated",
            VariantKind::Cocoop => "cocoop",
            VariantKind::CocoopGated => "cocoop-gated",
            VariantKind::ParamMatched => "param-matched",
            VariantKind::AlwaysFrozen => "always-frozen",
            VariantKind::ExplicitReg => "explicit-reg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabError::BadValue {
                key: "variant.kind".into(),
                reason: format!("unknown variant kind `{s}`"),
            })
    }

    /// Deep prompts in both towers.
    pub fn is_deep(self) -> bool {
        !matches!(
            self,
            VariantKind::Coop | VariantKind::CoopGated | VariantKind::Cocoop | VariantKind::CocoopGated
        )
    }

    pub fn has_coupling(self) -> bool {
        self.is_deep() && self != VariantKind::Maple
    }

    /// Length and depth gates over deep prompts.
    pub fn has_deep_gates(self) -> bool {
        matches!(self, VariantKind::AdaptiveBimaple | VariantKind::AlwaysFrozen)
    }

    pub fn has_gates(self) -> bool {
        self.has_deep_gates() || matches!(self, VariantKind::CoopGated | VariantKind::CocoopGated)
    }

    /// The ungated assembly this variant extends, used for overhead ratios.
    pub fn base(self) -> Option<VariantKind> {
        match self {
            VariantKind::Maple | VariantKind::Coop | VariantKind::Cocoop => None,
            VariantKind::Bimaple => Some(VariantKind::Maple),
            VariantKind::CoopGated => Some(VariantKind::Coop),
            VariantKind::CocoopGated => Some(VariantKind::Cocoop),
            _ => Some(VariantKind::Bimaple),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    /// Only read by kinds with deep gates.
    pub strategy: GatingStrategy,
    /// Only read by `explicit-reg`.
    pub dropout_rate: f64,
    /// Only read by `explicit-reg`.
    pub extra_weight_decay: f64,
    /// Context tokens of the CoOp family.
    pub context_len: usize,
    /// Hidden width of the CoCoOp meta-network.
    pub meta_hidden: usize,
    pub gate_init: GateInit,
    pub prompt_init_std: f64,
    pub map_kind: MapKind,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            kind: VariantKind::AdaptiveBimaple,
            strategy: GatingStrategy::PerToken,
            dropout_rate: 0.1,
            extra_weight_decay: 5e-4,
            context_len: 8,
            meta_hidden: 16,
            gate_init: GateInit::Ones,
            prompt_init_std: 0.02,
            map_kind: MapKind::Mlp,
        }
    }
}

impl VariantSpec {
    pub fn of(kind: VariantKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(LabError::BadValue {
                key: format!("variant.{key}"),
                reason: reason.into(),
            })
        };
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must lie in [0, 1)");
        }
        if !(self.extra_weight_decay >= 0.0 && self.extra_weight_decay.is_finite()) {
            return bad("extra_weight_decay", "must be non-negative");
        }
        if self.context_len == 0 {
            return bad("context_len", "must be positive");
        }
        if self.meta_hidden == 0 {
            return bad("meta_hidden", "must be positive");
        }
        if !(self.prompt_init_std >= 0.0 && self.prompt_init_std.is_finite()) {
            return bad("prompt_init_std", "must be non-negative");
        }
        self.gate_init.validate()
    }
}

/// CoOp context tokens `(M, width)`. Gate logits of the gated kind live in
/// the model's [`GateSet`] with shape `(1, M)`.
#[derive(Clone, Debug)]
pub struct CoOpContext {
    pub ctx: Parameter,
}

/// CoCoOp meta-network and, for the gated kind, per-token affine gate heads.
#[derive(Clone, Debug)]
pub struct CoCoOpGateNet {
    /// `w1 (E, h)`, `b1 (h,)`, `w2 (h, width)`, `b2 (width,)`
    pub meta: Vec<Parameter>,
    /// `w (M, width)`, `b (M,)`
    pub heads: Option<[Parameter; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterAudit {
    pub per_group: BTreeMap<String, usize>,
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParameterAudit {
    pub fn group(&self, group: ParamGroup) -> usize {
        self.per_group.get(group.as_str()).copied().unwrap_or(0)
    }
}

/// A named run of entries in the flattened gate-gradient vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSlice {
    pub name: String,
    pub params: Vec<String>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct PromptModel {
    spec: VariantSpec,
    encoder: EncoderConfig,
    pub stack: Option<PromptStack>,
    pub coupling: Option<CouplingMaps>,
    pub gates: Option<GateSet>,
    pub context: Option<CoOpContext>,
    pub cocoop: Option<CoCoOpGateNet>,
    /// Weight-decay-only block of the parameter-matched control.
    pub buffer: Option<Parameter>,
}

pub enum Mode<'a> {
    /// Draws random gate masks and dropout from the given stream.
    Train(&'a mut ChaCha8Rng),
    /// Hard depth decisions.
    Infer,
    /// Inference with the soft depth weights used in training.
    Relaxed,
}

impl Mode<'_> {
    fn gate_mode(&self) -> GateMode {
        match self {
            Mode::Train(_) => GateMode::Train,
            Mode::Infer => GateMode::Infer,
            Mode::Relaxed => GateMode::Train,
        }
    }
}

/// Regularizer terms produced by a forward pass (absent when the variant
/// lacks the corresponding structure).
#[derive(Clone, Debug, Default)]
pub struct Regularizers {
    pub cycle: Option<Var>,
    pub sparsity: Option<Var>,
    pub smoothness: Option<Var>,
    pub entropy: Option<Var>,
}

/// Gate values observed during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateObservation {
    /// Applied length multipliers per layer (batch means for instance gates).
    pub multipliers: Vec<Vec<f64>>,
    pub l_eff: Vec<f64>,
    pub depth: Vec<f64>,
    /// Effective length of every input under instance-conditioned gates.
    pub per_input_l_eff: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B, C)`
    pub logits: Var,
    pub regularizers: Regularizers,
    pub gates: GateObservation,
    /// Image embeddings `(B, E)`.
    pub image_embeddings: Var,
    /// Class embeddings `(C, E)`, or `(B, C, E)` when conditioned on the image.
    pub class_embeddings: Var,
}

fn gaussian_param(seed: u64, name: String, group: ParamGroup, shape: &[usize], std: f64) -> Parameter {
    let value = rng::gaussian(&mut rng::stream(seed, &name), shape, std);
    Parameter::new(name, group, value)
}

fn zeros_param(name: String, group: ParamGroup, shape: &[usize]) -> Parameter {
    Parameter::new(name, group, Tensor::zeros(shape))
}

fn build_map(seed: u64, name: &str, kind: MapKind, from: usize, to: usize) -> CouplingMap {
    let group = ParamGroup::Coupling;
    let weights = match kind {
        MapKind::Linear => {
            let w = if from == to {
                Tensor::from_fn(&[from, to], |i| if i / to == i % to { 1.0 } else { 0.0 })
            } else {
                rng::gaussian(&mut rng::stream(seed, &format!("{name}.w")), &[from, to], 1.0 / (from as f64).sqrt())
            };
            vec![Parameter::new(format!("{name}.w"), group, w)]
        }
        MapKind::Mlp => {
            let hidden = from.min(to);
            vec![
                gaussian_param(seed, format!("{name}.w1"), group, &[from, hidden], 1.0 / (from as f64).sqrt()),
                zeros_param(format!("{name}.b1"), group, &[hidden]),
                gaussian_param(seed, format!("{name}.w2"), group, &[hidden, to], 1.0 / (hidden as f64).sqrt()),
                zeros_param(format!("{name}.b2"), group, &[to]),
            ]
        }
    };
    CouplingMap { kind, weights }
}

fn gate_param(spec: &VariantSpec, seed: u64, name: &str, group: ParamGroup, shape: &[usize]) -> Result<Parameter> {
    let n = shape.iter().product();
    let values = init_gates(spec.gate_init, n, rng::stream(seed, name))?;
    let t = Tensor::new(shape.to_vec(), values)?;
    Ok(if spec.kind == VariantKind::AlwaysFrozen {
        Parameter::frozen(name, group, t)
    } else {
        Parameter::new(name, group, t)
    })
}

/// Assembles the trainable model of a variant.
pub fn build_variant(spec: &VariantSpec, enc: &EncoderConfig, seed: u64) -> Result<PromptModel> {
    spec.validate()?;
    enc.validate()?;
    let kind = spec.kind;
    let (depth, n, dt, dv) = (enc.depth, enc.max_prompt_len, enc.text_width, enc.vision_width);
    let std = spec.prompt_init_std;
    let mut model = PromptModel {
        spec: spec.clone(),
        encoder: enc.clone(),
        stack: None,
        coupling: None,
        gates: None,
        context: None,
        cocoop: None,
        buffer: None,
    };
    if kind.is_deep() {
        model.stack = Some(PromptStack {
            text: (0..depth)
                .map(|d| gaussian_param(seed, format!("prompt.text.{d}"), ParamGroup::Prompt, &[n, dt], std))
                .collect(),
            visual: (0..depth)
                .map(|d| gaussian_param(seed, format!("prompt.visual.{d}"), ParamGroup::Prompt, &[n, dv], std))
                .collect(),
        });
    }
    if kind.has_coupling() {
        model.coupling = Some(CouplingMaps {
            l2v: (0..depth)
                .map(|d| build_map(seed, &format!("coupling.l2v.{d}"), spec.map_kind, dt, dv))
                .collect(),
            v2l: (0..depth)
                .map(|d| build_map(seed, &format!("coupling.v2l.{d}"), spec.map_kind, dv, dt))
                .collect(),
            alpha: zeros_param("coupling.alpha".into(), ParamGroup::Coupling, &[depth]),
            beta: zeros_param("coupling.beta".into(), ParamGroup::Coupling, &[depth]),
        });
    }
    if kind.has_deep_gates() {
        let length = match spec.strategy.logits_per_layer(n) {
            Some(k) => Some(gate_param(spec, seed, "gate.length", ParamGroup::Gate, &[depth, k])?),
            None => None,
        };
        model.gates = Some(GateSet {
            length,
            depth: Some(gate_param(spec, seed, "gate.depth", ParamGroup::Gate, &[depth])?),
            tau: 1.0,
        });
    }
    if kind == VariantKind::ParamMatched {
        let reference = build_variant(&VariantSpec::of(VariantKind::AdaptiveBimaple).with_strategy(spec.strategy), enc, seed)?;
        let count = reference.gates.as_ref().map_or(0, |g| g.parameters().map(Parameter::numel).sum());
        let values = init_gates(spec.gate_init, count, rng::stream(seed, "buffer"))?;
        model.buffer = Some(Parameter::new("buffer", ParamGroup::Prompt, Tensor::new(vec![count], values)?));
    }
    let m = spec.context_len;
    if matches!(kind, VariantKind::Coop | VariantKind::CoopGated | VariantKind::Cocoop | VariantKind::CocoopGated) {
        if kind == VariantKind::CoopGated {
            model.gates = Some(GateSet {
                length: Some(gate_param(spec, seed, "gate.length", ParamGroup::Gate, &[1, m])?),
                depth: None,
                tau: 1.0,
            });
        }
        model.context = Some(CoOpContext {
            ctx: gaussian_param(seed, "coop.ctx".into(), ParamGroup::Prompt, &[m, dt], std),
        });
    }
    if matches!(kind, VariantKind::Cocoop | VariantKind::CocoopGated) {
        let (e, h) = (enc.embed_dim, spec.meta_hidden);
        let meta = vec![
            gaussian_param(seed, "meta.w1".into(), ParamGroup::Prompt, &[e, h], 1.0 / (e as f64).sqrt()),
            zeros_param("meta.b1".into(), ParamGroup::Prompt, &[h]),
            gaussian_param(seed, "meta.w2".into(), ParamGroup::Prompt, &[h, dt], std),
            zeros_param("meta.b2".into(), ParamGroup::Prompt, &[dt]),
        ];
        let heads = if kind == VariantKind::CocoopGated {
            let b = init_gates(spec.gate_init, m, rng::stream(seed, "gate_net.b"))?;
            Some([
                zeros_param("gate_net.w".into(), ParamGroup::GateNet, &[m, dt]),
                Parameter::new("gate_net.b", ParamGroup::GateNet, Tensor::new(vec![m], b)?),
            ])
        } else {
            None
        };
        model.cocoop = Some(CoCoOpGateNet { meta, heads });
    }
    Ok(model)
}

impl VariantSpec {
    pub fn with_strategy(mut self, strategy: GatingStrategy) -> Self {
        self.strategy = strategy;
        self
    }
}

/// Exact element counts per group.
pub fn count_parameters(model: &PromptModel) -> ParameterAudit {
    let mut audit = ParameterAudit::default();
    for group in ParamGroup::ALL {
        if group != ParamGroup::Backbone {
            audit.per_group.insert(group.as_str().to_string(), 0);
        }
    }
    for p in model.parameters() {
        *audit.per_group.entry(p.group().as_str().to_string()).or_insert(0) += p.numel();
        audit.total += p.numel();
        if p.is_frozen() {
            audit.frozen += p.numel();
        } else {
            audit.trainable += p.numel();
        }
    }
    audit
}

impl PromptModel {
    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn kind(&self) -> VariantKind {
        self.spec.kind
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        if let Some(s) = &self.stack {
            out.extend(s.text.iter().chain(&s.visual));
        }
        if let Some(c) = &self.coupling {
            out.extend(c.parameters());
        }
        if let Some(g) = &self.gates {
            out.extend(g.parameters());
        }
        if let Some(c) = &self.context {
            out.push(&c.ctx);
        }
        if let Some(c) = &self.cocoop {
            out.extend(c.meta.iter());
            out.extend(c.heads.iter().flatten());
        }
        out.extend(self.buffer.iter());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        if let Some(s) = &mut self.stack {
            out.extend(s.text.iter_mut().chain(s.visual.iter_mut()));
        }
        if let Some(c) = &mut self.coupling {
            out.extend(c.parameters_mut());
        }
        if let Some(g) = &mut self.gates {
            out.extend(g.parameters_mut());
        }
        if let Some(c) = &mut self.context {
            out.push(&mut c.ctx);
        }
        if let Some(c) = &mut self.cocoop {
            out.extend(c.meta.iter_mut());
            out.extend(c.heads.iter_mut().flatten());
        }
        out.extend(self.buffer.iter_mut());
        out
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters().into_iter().find(|p| p.name() == name)
    }

    pub fn set_tau(&mut self, tau: f64) {
        if let Some(g) = &mut self.gates {
            g.tau = tau;
        }
    }

    /// Prompt tokens per layer subject to length gating.
    pub fn gated_tokens(&self) -> usize {
        match self.spec.kind {
            VariantKind::CoopGated | VariantKind::CocoopGated => self.spec.context_len,
            _ => self.encoder.max_prompt_len,
        }
    }

    /// Layout of the flattened gate-gradient vector.
    pub fn gate_layout(&self) -> Vec<GateSlice> {
        let mut out = Vec::new();
        let mut push = |name: &str, params: Vec<&Parameter>| {
            let len = params.iter().map(|p| p.numel()).sum();
            if len > 0 {
                out.push(GateSlice {
                    name: name.into(),
                    params: params.iter().map(|p| p.name().to_string()).collect(),
                    len,
                });
            }
        };
        if let Some(g) = &self.gates {
            push("length", g.length.iter().collect());
            push("depth", g.depth.iter().collect());
        }
        if let Some(c) = &self.cocoop {
            push("gate-net", c.heads.iter().flatten().collect());
        }
        out
    }

    /// Gate gradients flattened in [`PromptModel::gate_layout`] order. Frozen
    /// gates contribute zeros.
    pub fn flatten_gate_grads(&self, grads: &GradientMap) -> Vec<f64> {
        let mut out = Vec::new();
        for slice in self.gate_layout() {
            for name in &slice.params {
                match grads.get(name) {
                    Some(t) => out.extend_from_slice(t.data()),
                    None => {
                        let n = self.parameter(name).map_or(0, Parameter::numel);
                        out.extend(std::iter::repeat_n(0.0, n));
                    }
                }
            }
        }
        out
    }

    /// Scores `patches` `(B, P, vision_width)` against `classes`
    /// `(C, T, text_width)`.
    pub fn forward(
        &self,
        g: &Graph,
        enc: &FrozenEncoder,
        classes: &Tensor,
        patches: &Tensor,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        if enc.config() != &self.encoder {
            return Err(LabError::invalid("model was built for a different encoder"));
        }
        if self.spec.kind.is_deep() {
            self.forward_deep(g, enc, classes, patches, mode)
        } else if self.cocoop.is_some() {
            self.forward_cocoop(g, enc, classes, patches)
        } else {
            self.forward_coop(g, enc, classes, patches)
        }
    }

    fn forward_deep(
        &self,
        g: &Graph,
        enc: &FrozenEncoder,
        classes: &Tensor,
        patches: &Tensor,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let stack = self.stack.as_ref().expect("deep variants own a prompt stack");
        let depth = self.encoder.depth;
        let n = self.encoder.max_prompt_len;
        let text: Vec<Var> = stack.text.iter().map(|p| g.param(p)).collect::<std::result::Result<_, _>>()?;
        let visual: Vec<Var> = stack.visual.iter().map(|p| g.param(p)).collect::<std::result::Result<_, _>>()?;
        let coupling = self.coupling.as_ref().map(|c| c.bind(g)).transpose()?;
        let gates = self.gates.as_ref().map(|s| s.bind(g)).transpose()?;
        let gate_mode = mode.gate_mode();
        let (depth_w, depth_acts) = match &gates {
            Some(b) => gating::depth_weights(g, b, gate_mode)?,
            None => (Vec::new(), Vec::new()),
        };
        let strategy = self.spec.strategy;
        let dropout = match (&mode, self.spec.kind) {
            (Mode::Train(_), VariantKind::ExplicitReg) if self.spec.dropout_rate > 0.0 => Some(self.spec.dropout_rate),
            _ => None,
        };

        let mut obs = GateObservation::default();
        let mut regs = Regularizers::default();
        let mut l_effs = Vec::new();
        let mut entropy_acts = Vec::new();
        let mut text_ins = Vec::with_capacity(depth);
        let mut vis_ins = Vec::with_capacity(depth);
        for d in 0..depth {
            let (mut t, mut v) = (text[d], visual[d]);
            if let Some(c) = &coupling {
                (t, v) = gating::couple_bidirectional(g, t, v, c, d)?;
            }
            if let (Some(rate), Mode::Train(r)) = (dropout, &mut mode) {
                t = apply_dropout(g, t, rate, r)?;
                v = apply_dropout(g, v, rate, r)?;
            }
            if let Some(b) = &gates {
                let mask: Option<Vec<f64>> = match (&mut mode, strategy) {
                    (Mode::Train(r), GatingStrategy::Random) => {
                        Some((0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
                    }
                    _ => None,
                };
                let lg = gating::length_gate(g, b, d, n, strategy, mask.as_deref())?;
                if strategy != GatingStrategy::FixedAllOn {
                    t = gating::scale_tokens(g, t, lg.multipliers)?;
                    v = gating::scale_tokens(g, v, lg.multipliers)?;
                }
                obs.multipliers.push(g.value(lg.multipliers)?.into_data());
                obs.l_eff.push(g.item(lg.l_eff)?);
                l_effs.push(lg.l_eff);
                match strategy {
                    GatingStrategy::PerToken => entropy_acts.push(lg.multipliers),
                    GatingStrategy::PerLayer => entropy_acts.push(g.slice(lg.multipliers, 0, 0, 1)?),
                    _ => {}
                }
            }
            let weight = depth_w.get(d).copied().unwrap_or(InsertWeight::Const(1.0));
            text_ins.push(Some(Insertion { prompts: t, weight }));
            vis_ins.push(Some(Insertion { prompts: v, weight }));
        }
        for &w in &depth_acts {
            obs.depth.push(g.item(w)?);
        }
        if let Some(c) = &coupling {
            regs.cycle = Some(objective::cycle_loss(g, &text, c)?);
        }
        if !l_effs.is_empty() {
            regs.sparsity = Some(objective::sparsity_loss(g, &l_effs)?);
        }
        if !depth_acts.is_empty() {
            regs.smoothness = Some(objective::smoothness_loss(g, &depth_acts)?);
            entropy_acts.extend(depth_acts.iter().copied());
        }
        if !entropy_acts.is_empty() {
            regs.entropy = Some(objective::entropy_loss(g, &entropy_acts)?);
        }

        let class_tokens = g.constant(classes.clone())?;
        let txt = enc.encode_text(g, &text_ins, class_tokens)?;
        let img = enc.encode_image(g, &vis_ins, g.constant(patches.clone())?)?;
        let logits = backbone::logits(g, img, txt, self.encoder.logit_scale)?;
        Ok(ForwardOutput {
            logits,
            regularizers: regs,
            gates: obs,
            image_embeddings: img,
            class_embeddings: txt,
        })
    }

    fn forward_coop(&self, g: &Graph, enc: &FrozenEncoder, classes: &Tensor, patches: &Tensor) -> Result<ForwardOutput> {
        let context = self.context.as_ref().expect("CoOp variants own a context");
        let mut ctx = g.param(&context.ctx)?;
        let mut obs = GateObservation::default();
        let mut regs = Regularizers::default();
        if let Some(gates) = &self.gates {
            let bound = gates.bind(g)?;
            let lg = gating::length_gate(g, &bound, 0, self.spec.context_len, GatingStrategy::PerToken, None)?;
            ctx = gating::scale_tokens(g, ctx, lg.multipliers)?;
            obs.multipliers.push(g.value(lg.multipliers)?.into_data());
            obs.l_eff.push(g.item(lg.l_eff)?);
            regs.sparsity = Some(objective::sparsity_loss(g, &[lg.l_eff])?);
            regs.entropy = Some(objective::entropy_loss(g, &[lg.multipliers])?);
        }
        let txt = enc.encode_text(g, &[Some(Insertion::replace(ctx))], g.constant(classes.clone())?)?;
        let img = g.constant(enc.embed_images(patches.clone())?)?;
        let logits = backbone::logits(g, img, txt, self.encoder.logit_scale)?;
        Ok(ForwardOutput {
            logits,
            regularizers: regs,
            gates: obs,
            image_embeddings: img,
            class_embeddings: txt,
        })
    }

    fn forward_cocoop(&self, g: &Graph, enc: &FrozenEncoder, classes: &Tensor, patches: &Tensor) -> Result<ForwardOutput> {
        let context = self.context.as_ref().expect("CoCoOp variants own a context");
        let net = self.cocoop.as_ref().expect("CoCoOp variants own a meta-network");
        let (m, dt) = (self.spec.context_len, self.encoder.text_width);
        let cs = classes.shape().to_vec();
        if cs.len() != 3 {
            return Err(LabError::Shape(format!("class inputs must be (C, T, width), got {cs:?}")));
        }
        let (c, t) = (cs[0], cs[1]);
        let b = patches.shape().first().copied().unwrap_or(0);

        let img = g.constant(enc.embed_images(patches.clone())?)?;
        let meta: Vec<Var> = net.meta.iter().map(|p| g.param(p)).collect::<std::result::Result<_, _>>()?;
        let h = g.tanh(g.add_bias(g.matmul(img, meta[0])?, meta[1])?)?;
        let pi = g.add_bias(g.matmul(h, meta[2])?, meta[3])?;

        let ctx = g.broadcast_to(g.param(&context.ctx)?, &[b, m, dt])?;
        let shift = g.broadcast_to(g.reshape(pi, &[b, 1, dt])?, &[b, m, dt])?;
        let mut c_x = g.add(ctx, shift)?;
        let mut obs = GateObservation::default();
        let mut regs = Regularizers::default();
        if let Some([w, bias]) = &net.heads {
            let (gated, gate_values, l_eff) = gating::cocoop_gate(g, c_x, pi, g.param(w)?, g.param(bias)?)?;
            c_x = gated;
            let values = g.value(gate_values)?;
            let mut mean = vec![0.0; m];
            for row in values.data().chunks(m) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v / b as f64;
                }
            }
            let per_input = g.value(l_eff)?.into_data();
            obs.l_eff.push(per_input.iter().sum::<f64>() / b as f64);
            obs.multipliers.push(mean);
            obs.per_input_l_eff = Some(per_input);
            regs.sparsity = Some(g.mean(l_eff)?);
            regs.entropy = Some(g.scale(objective::entropy_loss(g, &[gate_values])?, 1.0 / b as f64)?);
        }
        let prompts = g.reshape(
            g.broadcast_to(g.reshape(c_x, &[b, 1, m, dt])?, &[b, c, m, dt])?,
            &[b * c, m, dt],
        )?;
        let tokens = {
            let tiled = Tensor::from_fn(&[b * c, t, dt], |i| classes.data()[i % (c * t * dt)]);
            g.constant(tiled)?
        };
        let txt = enc.encode_text(g, &[Some(Insertion::replace(prompts))], tokens)?;
        let e = self.encoder.embed_dim;
        let txt = g.reshape(txt, &[b, c, e])?;
        let sims = g.matmul(g.reshape(img, &[b, 1, e])?, g.transpose_last(txt)?)?;
        let logits = g.scale(g.reshape(sims, &[b, c])?, self.encoder.logit_scale)?;
        Ok(ForwardOutput {
            logits,
            regularizers: regs,
            gates: obs,
            image_embeddings: img,
            class_embeddings: txt,
        })
    }
}

fn apply_dropout(g: &Graph, x: Var, rate: f64, r: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(x)?;
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(&shape, |_| if r.random_bool(rate) { 0.0 } else { keep });
    Ok(g.mul(x, g.constant(mask)?)?)
}

//! Prompt containers and the gating operations applied to them.

use gatelab_autodiff::{sigmoid, Graph, Parameter, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::InsertWeight;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingStrategy {
    #[default]
    PerToken,
    PerLayer,
    FixedAllOn,
    Random,
}

impl GatingStrategy {
    pub const ALL: [GatingStrategy; 4] = [
        GatingStrategy::PerToken,
        GatingStrategy::PerLayer,
        GatingStrategy::FixedAllOn,
        GatingStrategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GatingStrategy::PerToken => "per-token",
            GatingStrategy::PerLayer => "per-layer",
            GatingStrategy::FixedAllOn => "fixed-all-on",
            GatingStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Length-gate logits per layer, or `None` when the strategy has none.
    pub fn logits_per_layer(self, n_tokens: usize) -> Option<usize> {
        match self {
            GatingStrategy::PerToken => Some(n_tokens),
            GatingStrategy::PerLayer => Some(1),
            GatingStrategy::FixedAllOn | GatingStrategy::Random => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Infer,
}

/// Per-layer text and visual prompts, each `(N, width)`.
#[derive(Clone, Debug)]
pub struct PromptStack {
    pub text: Vec<Parameter>,
    pub visual: Vec<Parameter>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    /// `tanh(x W1 + b1) W2 + b2`
    #[default]
    Mlp,
    /// `x W`
    Linear,
}

/// Cross-modal map applied row-wise to a prompt matrix.
#[derive(Clone, Debug)]
pub struct CouplingMap {
    pub kind: MapKind,
    pub weights: Vec<Parameter>,
}

impl CouplingMap {
    pub fn bind(&self, g: &Graph) -> Result<BoundMap> {
        Ok(BoundMap {
            kind: self.kind,
            vars: self.weights.iter().map(|p| g.param(p)).collect::<std::result::Result<_, _>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundMap {
    kind: MapKind,
    vars: Vec<Var>,
}

impl BoundMap {
    pub fn apply(&self, g: &Graph, x: Var) -> Result<Var> {
        match self.kind {
            MapKind::Linear => Ok(g.matmul(x, self.vars[0])?),
            MapKind::Mlp => {
                let h = g.tanh(g.add_bias(g.matmul(x, self.vars[0])?, self.vars[1])?)?;
                Ok(g.add_bias(g.matmul(h, self.vars[2])?, self.vars[3])?)
            }
        }
    }
}

/// Per-layer maps between the towers plus fusion logits `alpha`, `beta` of
/// shape `(D,)`.
#[derive(Clone, Debug)]
pub struct CouplingMaps {
    pub l2v: Vec<CouplingMap>,
    pub v2l: Vec<CouplingMap>,
    pub alpha: Parameter,
    pub beta: Parameter,
}

impl CouplingMaps {
    pub fn depth(&self) -> usize {
        self.l2v.len()
    }

    pub fn bind(&self, g: &Graph) -> Result<BoundCoupling> {
        Ok(BoundCoupling {
            l2v: self.l2v.iter().map(|m| m.bind(g)).collect::<Result<_>>()?,
            v2l: self.v2l.iter().map(|m| m.bind(g)).collect::<Result<_>>()?,
            alpha: g.param(&self.alpha)?,
            beta: g.param(&self.beta)?,
        })
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.l2v
            .iter()
            .chain(&self.v2l)
            .flat_map(|m| m.weights.iter())
            .chain([&self.alpha, &self.beta])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.l2v
            .iter_mut()
            .chain(self.v2l.iter_mut())
            .flat_map(|m| m.weights.iter_mut())
            .chain([&mut self.alpha, &mut self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct BoundCoupling {
    pub l2v: Vec<BoundMap>,
    pub v2l: Vec<BoundMap>,
    pub alpha: Var,
    pub beta: Var,
}

/// Length and depth gate logits.
#[derive(Clone, Debug)]
pub struct GateSet {
    /// `(D, n)` where `n` is the token count (per-token) or 1 (per-layer).
    pub length: Option<Parameter>,
    /// `(D,)`
    pub depth: Option<Parameter>,
    pub tau: f64,
}

impl GateSet {
    pub fn bind(&self, g: &Graph) -> Result<BoundGates> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LabError::invalid(format!("gate temperature {} must be positive", self.tau)));
        }
        Ok(BoundGates {
            length: self.length.as_ref().map(|p| g.param(p)).transpose()?,
            depth: self.depth.as_ref().map(|p| g.param(p)).transpose()?,
            depth_logits: self.depth.as_ref().map(|p| p.value.data().to_vec()),
            tau: self.tau,
        })
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.length.iter().chain(self.depth.iter())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.length.iter_mut().chain(self.depth.iter_mut())
    }
}

#[derive(Clone, Debug)]
pub struct BoundGates {
    pub length: Option<Var>,
    pub depth: Option<Var>,
    depth_logits: Option<Vec<f64>>,
    pub tau: f64,
}

/// Length gate of one layer.
#[derive(Clone, Debug)]
pub struct LengthGate {
    /// Per-token multipliers, `(N,)`.
    pub multipliers: Var,
    /// Sum of the multipliers.
    pub l_eff: Var,
}

fn layer_check(d: usize, depth: usize) -> Result<()> {
    if d >= depth {
        return Err(LabError::LayerOutOfRange { layer: d, depth });
    }
    Ok(())
}

/// Fused prompts of layer `d`:
/// `P_t* = a P_t + (1 - a) f_vl(P_v)` and `P_v* = b P_v + (1 - b) f_lv(P_t)`
/// with `a = sigmoid(alpha_d)`, `b = sigmoid(beta_d)`.
pub fn couple_bidirectional(g: &Graph, text: Var, visual: Var, maps: &BoundCoupling, d: usize) -> Result<(Var, Var)> {
    layer_check(d, maps.l2v.len())?;
    let a = g.sigmoid(g.slice(maps.alpha, 0, d, 1)?)?;
    let b = g.sigmoid(g.slice(maps.beta, 0, d, 1)?)?;
    let from_visual = maps.v2l[d].apply(g, visual)?;
    let from_text = maps.l2v[d].apply(g, text)?;
    let text_star = g.add(g.mul(a, text)?, g.mul(g.one_minus(a)?, from_visual)?)?;
    let visual_star = g.add(g.mul(b, visual)?, g.mul(g.one_minus(b)?, from_text)?)?;
    Ok((text_star, visual_star))
}

/// Multipliers for the `n` prompt tokens of layer `d`.
///
/// `mask` supplies the Bernoulli draws of the random strategy; without one the
/// expected multiplier 0.5 is used.
pub fn length_gate(
    g: &Graph,
    gates: &BoundGates,
    d: usize,
    n: usize,
    strategy: GatingStrategy,
    mask: Option<&[f64]>,
) -> Result<LengthGate> {
    let multipliers = match strategy {
        GatingStrategy::FixedAllOn => g.constant(Tensor::full(&[n], 1.0))?,
        GatingStrategy::Random => {
            let values = match mask {
                Some(m) if m.len() == n => m.to_vec(),
                Some(m) => {
                    return Err(LabError::Shape(format!("random mask of length {} for {n} tokens", m.len())))
                }
                None => vec![0.5; n],
            };
            g.constant(Tensor::new(vec![n], values)?)?
        }
        GatingStrategy::PerToken | GatingStrategy::PerLayer => {
            let logits = gates
                .length
                .ok_or_else(|| LabError::invalid("strategy needs length gate logits"))?;
            let shape = g.shape(logits)?;
            layer_check(d, shape[0])?;
            let per_layer = shape[1];
            let row = g.reshape(g.slice(logits, 0, d, 1)?, &[per_layer])?;
            let act = g.sigmoid(g.scale(row, 1.0 / gates.tau)?)?;
            match strategy {
                GatingStrategy::PerToken if per_layer != n => {
                    return Err(LabError::Shape(format!(
                        "{n} prompt tokens against {per_layer} length gates at layer {d}"
                    )))
                }
                GatingStrategy::PerToken => act,
                _ => g.broadcast_to(act, &[n])?,
            }
        }
    };
    let l_eff = g.sum(multipliers)?;
    Ok(LengthGate { multipliers, l_eff })
}

/// Scales each row of `prompts` (`(N, width)`) by its multiplier.
pub fn scale_tokens(g: &Graph, prompts: Var, multipliers: Var) -> Result<Var> {
    let shape = g.shape(prompts)?;
    let n = g.shape(multipliers)?.iter().product::<usize>();
    if shape.len() != 2 || shape[0] != n {
        return Err(LabError::Shape(format!("{n} multipliers for prompts of shape {shape:?}")));
    }
    let column = g.reshape(multipliers, &[n, 1])?;
    Ok(g.mul(g.broadcast_to(column, &shape)?, prompts)?)
}

/// Gated prompts of layer `d` and their effective length.
pub fn apply_length_gate(
    g: &Graph,
    prompts: Var,
    gates: &BoundGates,
    d: usize,
    strategy: GatingStrategy,
    mask: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let shape = g.shape(prompts)?;
    if shape.len() != 2 {
        return Err(LabError::Shape(format!("prompts must be (N, width), got {shape:?}")));
    }
    if strategy == GatingStrategy::FixedAllOn {
        let l_eff = g.scalar(shape[0] as f64)?;
        return Ok((prompts, l_eff));
    }
    let gate = length_gate(g, gates, d, shape[0], strategy, mask)?;
    Ok((scale_tokens(g, prompts, gate.multipliers)?, gate.l_eff))
}

/// Depth insertion weights as plain values: soft `sigmoid(g / tau)` during
/// training, hard `sigmoid(g) > 0.5` at inference.
pub fn apply_depth_gate(gates: &GateSet, mode: GateMode) -> Vec<f64> {
    match &gates.depth {
        None => Vec::new(),
        Some(p) => p
            .value
            .data()
            .iter()
            .map(|&l| depth_value(l, gates.tau, mode))
            .collect(),
    }
}

fn depth_value(logit: f64, tau: f64, mode: GateMode) -> f64 {
    match mode {
        GateMode::Train => sigmoid(logit / tau),
        GateMode::Infer => {
            if sigmoid(logit) > 0.5 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Graph version of [`apply_depth_gate`]. Returns the insertion weights and,
/// in training mode, the activation nodes.
pub fn depth_weights(g: &Graph, gates: &BoundGates, mode: GateMode) -> Result<(Vec<InsertWeight>, Vec<Var>)> {
    let (Some(depth), Some(logits)) = (gates.depth, gates.depth_logits.as_ref()) else {
        return Ok((Vec::new(), Vec::new()));
    };
    match mode {
        GateMode::Infer => Ok((
            logits
                .iter()
                .map(|&l| InsertWeight::Const(depth_value(l, gates.tau, mode)))
                .collect(),
            Vec::new(),
        )),
        GateMode::Train => {
            let mut weights = Vec::with_capacity(logits.len());
            let mut acts = Vec::with_capacity(logits.len());
            for d in 0..logits.len() {
                let w = g.sigmoid(g.scale(g.slice(depth, 0, d, 1)?, 1.0 / gates.tau)?)?;
                weights.push(InsertWeight::Var(w));
                acts.push(w);
            }
            Ok((weights, acts))
        }
    }
}

/// Instance-conditioned gates `sigmoid(w_i . v(x) + b_i)` applied to
/// `(B, M, width)` prompts. `v_x` is `(B, k)`, `w` is `(M, k)` and `b` is
/// `(M,)`. Returns the gated prompts, the `(B, M)` gate values and the
/// per-instance effective lengths `(B,)`.
pub fn cocoop_gate(g: &Graph, c_of_x: Var, v_x: Var, w: Var, b: Var) -> Result<(Var, Var, Var)> {
    let cs = g.shape(c_of_x)?;
    let vs = g.shape(v_x)?;
    let ws = g.shape(w)?;
    let bs = g.shape(b)?;
    if cs.len() != 3 || vs.len() != 2 || ws.len() != 2 || vs[0] != cs[0] || ws[0] != cs[1] || ws[1] != vs[1] || bs != [cs[1]]
    {
        return Err(LabError::Shape(format!(
            "gate heads {ws:?}/{bs:?} incompatible with prompts {cs:?} and conditioning {vs:?}"
        )));
    }
    let (batch, m) = (cs[0], cs[1]);
    let scores = g.add_bias(g.matmul(v_x, g.transpose_last(w)?)?, b)?;
    let gates = g.sigmoid(scores)?;
    let column = g.reshape(gates, &[batch, m, 1])?;
    let gated = g.mul(g.broadcast_to(column, &cs)?, c_of_x)?;
    let l_eff = g.sum_last(gates)?;
    Ok((gated, gates, l_eff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in GatingStrategy::ALL {
            assert_eq!(GatingStrategy::parse(s.as_str()), Some(s));
        }
        assert_eq!(GatingStrategy::parse("sometimes"), None);
    }
}

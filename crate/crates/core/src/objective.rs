//! Classification loss and the auxiliary regularizers.

use gatelab_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gating::BoundCoupling;
use crate::variant::Regularizers;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_cyc: f64,
    pub lambda_sparse: f64,
    pub lambda_smooth: f64,
    /// Weight of the gate entropy bonus. The entropy is subtracted from the
    /// total so a positive weight pushes gates away from saturation.
    pub lambda_ent: f64,
    pub label_smoothing: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 0.1,
            lambda_sparse: 0.001,
            lambda_smooth: 0.0002,
            lambda_ent: 0.0,
            label_smoothing: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn zero() -> Self {
        Self {
            lambda_cyc: 0.0,
            lambda_sparse: 0.0,
            lambda_smooth: 0.0,
            lambda_ent: 0.0,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_ent", self.lambda_ent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::BadValue {
                    key: format!("objective.{key}"),
                    reason: format!("{v} is not a non-negative finite weight"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(LabError::BadValue {
                key: "objective.label_smoothing".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cyc: f64,
    pub sparse: f64,
    pub smooth: f64,
    pub ent: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the raw terms with the weights of `cfg`.
    pub fn resum(&self, cfg: &ObjectiveConfig) -> f64 {
        self.cls + cfg.lambda_cyc * self.cyc + cfg.lambda_sparse * self.sparse + cfg.lambda_smooth * self.smooth
            - cfg.lambda_ent * self.ent
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.cyc, self.sparse, self.smooth, self.ent, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(LabError::Shape(format!("{} labels for {batch} rows of logits", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LabError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy of `(B, C)` logits, with optional label
/// smoothing.
pub fn classification_loss(g: &Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits)?;
    let (b, c) = match shape.as_slice() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        _ => return Err(LabError::Shape(format!("logits must be (B, C), got {shape:?}"))),
    };
    if c == 0 {
        return Err(LabError::invalid("empty class list"));
    }
    check_labels(labels, b, c)?;
    let off = smoothing / c as f64;
    let target = Tensor::from_fn(&shape, |i| if labels[i / c] == i % c { 1.0 - smoothing + off } else { off });
    let lsm = g.log_softmax(logits)?;
    let picked = g.sum(g.mul(lsm, g.constant(target)?)?)?;
    Ok(g.scale(picked, -1.0 / b as f64)?)
}

/// Plain-value cross-entropy of a single logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_labels(&[label], 1, logits.len())?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `(1/D) sum_d ||P_d - f_vl(f_lv(P_d))||^2` over the text prompts.
pub fn cycle_loss(g: &Graph, text: &[Var], maps: &BoundCoupling) -> Result<Var> {
    if text.is_empty() || text.len() != maps.l2v.len() {
        return Err(LabError::Shape(format!(
            "{} prompt layers against {} coupling layers",
            text.len(),
            maps.l2v.len()
        )));
    }
    let mut terms = Vec::with_capacity(text.len());
    for (d, &p) in text.iter().enumerate() {
        let back = maps.v2l[d].apply(g, maps.l2v[d].apply(g, p)?)?;
        let diff = g.sub(p, back)?;
        terms.push(g.sum(g.mul(diff, diff)?)?);
    }
    let total = sum_scalars(g, &terms)?;
    Ok(g.scale(total, 1.0 / text.len() as f64)?)
}

fn sum_scalars(g: &Graph, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => Ok(g.scalar(0.0)?),
        [one] => Ok(*one),
        _ => {
            let flat = terms
                .iter()
                .map(|&t| g.reshape(t, &[1]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(g.sum(g.concat(&flat, 0)?)?)
        }
    }
}

/// Sum of the per-layer effective lengths.
pub fn sparsity_loss(g: &Graph, l_eff: &[Var]) -> Result<Var> {
    sum_scalars(g, l_eff)
}

/// `sum_d |w_{d+1} - w_d|` over one-element depth activations. Ties
/// contribute a zero subgradient.
pub fn smoothness_loss(g: &Graph, depth: &[Var]) -> Result<Var> {
    let terms = depth
        .windows(2)
        .map(|w| Ok(g.abs(g.sub(w[1], w[0])?)?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(g, &terms)
}

/// Binary entropy summed over every activation. Activations must lie strictly
/// inside (0, 1).
pub fn entropy_loss(g: &Graph, acts: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(acts.len());
    for &a in acts {
        let b = g.one_minus(a)?;
        let plogp = g.add(g.mul(a, g.log(a)?)?, g.mul(b, g.log(b)?)?)?;
        terms.push(g.scale(g.sum(plogp)?, -1.0)?);
    }
    sum_scalars(g, &terms)
}

/// Combines the classification loss with the weighted regularizers. Terms
/// with zero weight are left out of the graph entirely.
pub fn total_loss(g: &Graph, cls: Var, regs: &Regularizers, cfg: &ObjectiveConfig) -> Result<(Var, LossBreakdown)> {
    let value = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| Ok(g.item(v)?)) };
    let mut breakdown = LossBreakdown {
        cls: g.item(cls)?,
        cyc: value(regs.cycle)?,
        sparse: value(regs.sparsity)?,
        smooth: value(regs.smoothness)?,
        ent: value(regs.entropy)?,
        total: 0.0,
    };
    let mut total = cls;
    for (term, weight) in [
        (regs.cycle, cfg.lambda_cyc),
        (regs.sparsity, cfg.lambda_sparse),
        (regs.smoothness, cfg.lambda_smooth),
        (regs.entropy, -cfg.lambda_ent),
    ] {
        if let (Some(t), true) = (term, weight != 0.0) {
            total = g.add(total, g.scale(t, weight)?)?;
        }
    }
    breakdown.total = g.item(total)?;
    Ok((total, breakdown))
}

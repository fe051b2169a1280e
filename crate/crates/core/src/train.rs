//! Training loop and evaluation for a single seed.

use std::collections::VecDeque;

use gatelab_autodiff::{Graph, ParamGroup, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenEncoder;
use crate::config::RunConfig;
use crate::data::{self, Dataset, Sample};
use crate::diagnostics::{
    detect_collapse, mean, representation_metrics, std_dev, CollapseVerdict, GradNorms, RepresentationMetrics,
    RunMeta, StepRecord, TrainingTrace,
};
use crate::error::{LabError, Result};
use crate::objective::{classification_loss, total_loss};
use crate::optim::{anneal_temperature, Optimizer};
use crate::rng;
use crate::variant::{build_variant, Mode, PromptModel, VariantKind};

/// Step records kept for an abort report.
pub const ABORT_WINDOW: usize = 10;

const EVAL_CHUNK: usize = 64;
const EVAL_CHUNK_CONDITIONED: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: mean(xs),
            std: std_dev(xs),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// How depth gates act during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthDecision {
    /// Thresholded insertion, the inference rule.
    Hard,
    /// The soft weights seen during training.
    Soft,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Percent correct.
    pub accuracy: f64,
    pub image_embeddings: Vec<Vec<f64>>,
    /// One embedding per class; image-conditioned embeddings are averaged
    /// over the evaluated images and renormalized.
    pub class_embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub per_input_l_eff: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub trace: TrainingTrace,
    pub base_acc: f64,
    pub novel_acc: f64,
    /// Absent when either accuracy is zero.
    pub h_mean: Option<f64>,
    /// Base and novel accuracy with soft depth weights, for deep-gated kinds.
    pub relaxed_acc: Option<(f64, f64)>,
    pub representation: Option<RepresentationMetrics>,
    /// Effective length spread across test inputs under instance gates.
    pub instance_l_eff: Option<Summary>,
    pub flops_per_step: u64,
    pub steps: usize,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = *t.shape().last().unwrap_or(&1);
    t.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Scores `samples` against `classes` `(C, T, text_width)` without training noise.
pub fn evaluate(
    model: &PromptModel,
    enc: &FrozenEncoder,
    classes: &Tensor,
    samples: &[Sample],
    depth: DepthDecision,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(LabError::invalid("nothing to evaluate"));
    }
    let n_classes = classes.shape()[0];
    let chunk = if model.kind() == VariantKind::Cocoop || model.kind() == VariantKind::CocoopGated {
        EVAL_CHUNK_CONDITIONED
    } else {
        EVAL_CHUNK
    };
    let mut correct = 0usize;
    let mut eval = Evaluation {
        accuracy: 0.0,
        image_embeddings: Vec::with_capacity(samples.len()),
        class_embeddings: Vec::new(),
        labels: Vec::with_capacity(samples.len()),
        per_input_l_eff: Vec::new(),
    };
    let mut class_sums: Option<Vec<Vec<f64>>> = None;
    for batch in samples.chunks(chunk) {
        let refs: Vec<&Sample> = batch.iter().collect();
        let patches = data::stack(&refs)?;
        let g = Graph::new();
        let mode = match depth {
            DepthDecision::Hard => Mode::Infer,
            DepthDecision::Soft => Mode::Relaxed,
        };
        let out = model.forward(&g, enc, classes, &patches, mode)?;
        let logits = g.value(out.logits)?;
        for (row, s) in logits.data().chunks(n_classes).zip(batch) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == s.label {
                correct += 1;
            }
            eval.labels.push(s.label);
        }
        eval.image_embeddings.extend(rows(&g.value(out.image_embeddings)?));
        let txt = g.value(out.class_embeddings)?;
        if txt.shape().len() == 2 {
            if eval.class_embeddings.is_empty() {
                eval.class_embeddings = rows(&txt);
            }
        } else {
            let per_image = rows(&txt);
            let sums = class_sums.get_or_insert_with(|| vec![vec![0.0; per_image[0].len()]; n_classes]);
            for (i, r) in per_image.iter().enumerate() {
                for (a, b) in sums[i % n_classes].iter_mut().zip(r) {
                    *a += b;
                }
            }
        }
        if let Some(l) = out.gates.per_input_l_eff {
            eval.per_input_l_eff.extend(l);
        }
    }
    if let Some(sums) = class_sums {
        eval.class_embeddings = sums.into_iter().map(normalized).collect();
    }
    eval.accuracy = 100.0 * correct as f64 / samples.len() as f64;
    Ok(eval)
}

fn numerical(step: usize, reason: String, recent: &VecDeque<StepRecord>) -> LabError {
    LabError::Numerical {
        step,
        reason,
        last_steps: recent.iter().cloned().collect(),
    }
}

/// Trains one seed and evaluates it on both test splits.
pub fn train_seed(cfg: &RunConfig, enc: &FrozenEncoder, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let dataset = data::generate(&cfg.task, enc, seed)?;
    let mut model = build_variant(&cfg.variant, enc.config(), seed)?;
    train_model(cfg, enc, &dataset, &mut model, seed)
}

/// Trains an already built model on `dataset`.
pub fn train_model(
    cfg: &RunConfig,
    enc: &FrozenEncoder,
    dataset: &Dataset,
    model: &mut PromptModel,
    seed: u64,
) -> Result<SeedOutcome> {
    let mut opt_cfg = cfg.optimizer.clone();
    if model.kind() == VariantKind::ExplicitReg {
        opt_cfg.weight_decay.prompt += cfg.variant.extra_weight_decay;
    }
    let mut opt = Optimizer::new(opt_cfg)?;
    let base_inputs = enc.class_inputs(&dataset.base_classes)?;
    let novel_inputs = enc.class_inputs(&dataset.novel_classes)?;
    let mut order_rng = rng::stream(seed, "train.order");
    let mut mask_rng = rng::stream(seed, "train.masks");

    let layout = model.gate_layout();
    let mut trace = TrainingTrace::new(RunMeta {
        seed,
        variant: model.kind(),
        strategy: cfg.variant.strategy,
        config_hash: cfg.hash(),
        n_max: model.gated_tokens(),
        gate_layout: layout,
    });
    let record_every = cfg.run.record_every.max(1);
    let mut recent: VecDeque<StepRecord> = VecDeque::with_capacity(ABORT_WINDOW);
    let mut order: Vec<usize> = (0..dataset.base_train.len()).collect();
    let mut step = 0usize;
    let mut flops = 0u64;

    for epoch in 0..cfg.optimizer.epochs {
        let tau = cfg
            .optimizer
            .temperature
            .as_ref()
            .map_or(1.0, |s| anneal_temperature(epoch as f64, s));
        model.set_tau(tau);
        order.shuffle(&mut order_rng);
        for idx in order.chunks(cfg.optimizer.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &dataset.base_train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let patches = data::stack(&batch)?;

            let g = Graph::new();
            let forward = model
                .forward(&g, enc, &base_inputs, &patches, Mode::Train(&mut mask_rng))
                .and_then(|out| {
                    let cls = classification_loss(&g, out.logits, &labels, cfg.objective.label_smoothing)?;
                    let (loss, parts) = total_loss(&g, cls, &out.regularizers, &cfg.objective)?;
                    Ok((out, loss, parts))
                });
            let (out, loss, parts) = match forward {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(numerical(step, e.to_string(), &recent)),
                Err(e) => return Err(e),
            };
            if !parts.is_finite() {
                return Err(numerical(step, format!("non-finite loss {parts:?}"), &recent));
            }
            if step == 0 {
                flops = g.matmul_flops();
            }
            let grads = match g.backward(loss) {
                Ok(gm) => gm,
                Err(e) => {
                    let e = LabError::from(e);
                    if e.is_numerical() {
                        return Err(numerical(step, e.to_string(), &recent));
                    }
                    return Err(e);
                }
            };
            let mut grad_norm = GradNorms {
                prompt: grads.group_norm(ParamGroup::Prompt),
                gate: grads.group_norm(ParamGroup::Gate),
                coupling: grads.group_norm(ParamGroup::Coupling),
                gate_net: grads.group_norm(ParamGroup::GateNet),
                gate_applied: 0.0,
            };
            if !grads.global_norm().is_finite() {
                return Err(numerical(step, "non-finite gradient".into(), &recent));
            }
            let gate_grad = model.flatten_gate_grads(&grads);
            let report = opt.step(&mut model.parameters_mut(), &grads, epoch)?;
            grad_norm.gate_applied = report.gate_norm_applied;
            if let Some(p) = model.parameters().iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(numerical(step, format!("parameter `{}` became non-finite", p.name()), &recent));
            }

            let record = StepRecord {
                step,
                epoch,
                loss: parts,
                grad_norm,
                gate_grad,
                gate_act: out.gates.multipliers.concat(),
                depth_act: out.gates.depth.clone(),
                l_eff: out.gates.l_eff.clone(),
                tau,
            };
            if recent.len() == ABORT_WINDOW {
                recent.pop_front();
            }
            recent.push_back(record.clone());
            if step.is_multiple_of(record_every) {
                trace.push(record)?;
            }
            step += 1;
        }
    }

    let base = evaluate(model, enc, &base_inputs, &dataset.base_test, DepthDecision::Hard)?;
    let novel = evaluate(model, enc, &novel_inputs, &dataset.novel_test, DepthDecision::Hard)?;
    let relaxed_acc = if model.kind().has_deep_gates() {
        let b = evaluate(model, enc, &base_inputs, &dataset.base_test, DepthDecision::Soft)?;
        let n = evaluate(model, enc, &novel_inputs, &dataset.novel_test, DepthDecision::Soft)?;
        Some((b.accuracy, n.accuracy))
    } else {
        None
    };
    let representation = match representation_metrics(&base.image_embeddings, &base.labels, &base.class_embeddings) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("seed {seed}: representation metrics unavailable: {e}");
            None
        }
    };
    let per_input: Vec<f64> = base.per_input_l_eff.iter().chain(&novel.per_input_l_eff).copied().collect();

    if model.kind().has_gates() {
        trace.verdict = match detect_collapse(&trace, &cfg.diagnostics) {
            Ok(v) => Some(v),
            Err(e @ LabError::ShortTrace(_)) => {
                log::warn!("seed {seed}: no collapse verdict: {e}");
                None
            }
            Err(e) => return Err(e),
        };
    }

    Ok(SeedOutcome {
        seed,
        trace,
        base_acc: base.accuracy,
        novel_acc: novel.accuracy,
        h_mean: data::harmonic_mean(base.accuracy, novel.accuracy).ok(),
        relaxed_acc,
        representation,
        instance_l_eff: Summary::of(&per_input),
        flops_per_step: flops,
        steps: step,
    })
}

/// Matrix-multiply FLOPs of one training forward and backward pass.
pub fn measure_flops(model: &PromptModel, enc: &FrozenEncoder, classes: &Tensor, batch: &[&Sample], seed: u64) -> Result<u64> {
    let patches = data::stack(batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let mut r = rng::stream(seed, "flops");
    let g = Graph::new();
    let out = model.forward(&g, enc, classes, &patches, Mode::Train(&mut r))?;
    let cls = classification_loss(&g, out.logits, &labels, 0.0)?;
    g.backward(cls)?;
    Ok(g.matmul_flops())
}

impl SeedOutcome {
    pub fn verdict(&self) -> Option<&CollapseVerdict> {
        self.trace.verdict.as_ref()
    }
}

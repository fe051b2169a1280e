//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.

use std::cell::RefCell;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gatelab::backbone::{EncoderConfig, FrozenEncoder};
use gatelab::config::RunConfig;
use gatelab::data::harmonic_mean;
use gatelab::diagnostics::{cancellation_rate_of, silhouette, CollapseVerdict, TrainingTrace, Verdict};
use gatelab::experiment::{self, RunOptions, RunResult};
use gatelab::gating::{apply_length_gate, GateSet, GatingStrategy};
use gatelab::objective::{classification_loss, total_loss, ObjectiveConfig};
use gatelab::optim::{equilibrium_factor, EquilibriumConfig};
use gatelab::rng;
use gatelab::variant::{build_variant, count_parameters, Mode, PromptModel, VariantKind, VariantSpec};
use gatelab_autodiff::{finite_diff_check, sigmoid, AutodiffError, Graph, ParamGroup, Parameter, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-5;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

// ---------------------------------------------------------------- A1

type Builder = fn(&Graph, &[Var]) -> Result<Var, AutodiffError>;
type OpCase = (&'static str, &'static [&'static [usize]], (f64, f64), u64, Builder);

fn project(g: &Graph, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(y)?;
    let mut r = rng::stream(seed, "project");
    let w = g.constant(Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)))?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn op_cases(shapes: &[&[usize]], range: (f64, f64), cases: u64, build: Builder) -> Result<(usize, f64), String> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut r = rng::stream(case, "a1-op");
        let params: Vec<Parameter> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::from_fn(s, |_| r.random_range(range.0..range.1));
                Parameter::new(format!("x{i}"), ParamGroup::Prompt, t)
            })
            .collect();
        let report = finite_diff_check(&params, FD_STEP, |g: &Graph, ps: &[Parameter]| {
            let vars = ps.iter().map(|p| g.param(p)).collect::<Result<Vec<_>, _>>()?;
            let y = build(g, &vars)?;
            project(g, y, 500 + case)
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
    }
    Ok((cases as usize, worst))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        text_width: 8,
        vision_width: 8,
        n_heads: 2,
        max_prompt_len: 3,
        n_word_tokens: 6,
        n_patch_tokens: 4,
        embed_dim: 4,
        vocab_size: 32,
        ..EncoderConfig::default()
    }
}

/// Finite-difference check of the complete training loss of a small
/// adaptive model against every trainable tensor.
fn gated_model_case(seed: u64) -> Result<f64, String> {
    let enc_cfg = tiny_encoder();
    let enc = FrozenEncoder::new(enc_cfg.clone()).map_err(|e| e.to_string())?;
    let mut model = build_variant(&VariantSpec::of(VariantKind::AdaptiveBimaple), &enc_cfg, seed).map_err(|e| e.to_string())?;
    // Move every tensor off its initialization so no term sits at a kink.
    let mut r = rng::stream(seed, "a1-perturb");
    for p in model.parameters_mut() {
        let std = if p.group() == ParamGroup::Prompt { 0.3 } else { 0.5 };
        let noise = rng::gaussian(&mut r, p.value.shape(), std);
        p.value.axpy(1.0, &noise).map_err(|e| e.to_string())?;
    }
    let classes = enc.class_inputs(&[0, 1, 2]).map_err(|e| e.to_string())?;
    let patches = rng::gaussian(&mut r, &[2, enc_cfg.n_patch_tokens, enc_cfg.vision_width], 1.0);
    let labels = [2, 0];
    let objective = ObjectiveConfig {
        lambda_cyc: 0.1,
        lambda_sparse: 0.01,
        lambda_smooth: 0.01,
        lambda_ent: 0.05,
        label_smoothing: 0.1,
    };
    let params: Vec<Parameter> = model.parameters().into_iter().cloned().collect();
    let report = finite_diff_check(&params, FD_STEP, |g: &Graph, ps: &[Parameter]| -> gatelab::Result<Var> {
        let mut m: PromptModel = model.clone();
        for (slot, p) in m.parameters_mut().into_iter().zip(ps) {
            slot.value = p.value.clone();
        }
        let mut masks = rng::stream(seed, "a1-masks");
        let out = m.forward(g, &enc, &classes, &patches, Mode::Train(&mut masks))?;
        let cls = classification_loss(g, out.logits, &labels, objective.label_smoothing)?;
        Ok(total_loss(g, cls, &out.regularizers, &objective)?.0)
    })
    .map_err(|e| e.to_string())?;
    Ok(report.max_rel_error)
}

fn a1() -> Outcome {
    let ops: [OpCase; 24] = [
        ("add", &[&[3, 4], &[3, 4]], (-3.0, 3.0), 5, |g, v| g.add(v[0], v[1])),
        ("sub", &[&[5], &[5]], (-3.0, 3.0), 4, |g, v| g.sub(v[0], v[1])),
        ("mul", &[&[2, 3], &[2, 3]], (-3.0, 3.0), 5, |g, v| g.mul(v[0], v[1])),
        ("scale", &[&[4]], (-3.0, 3.0), 3, |g, v| g.scale(v[0], -1.7)),
        ("one_minus", &[&[4]], (-3.0, 3.0), 3, |g, v| g.one_minus(v[0])),
        ("add_bias", &[&[2, 3, 4], &[4]], (-3.0, 3.0), 4, |g, v| g.add_bias(v[0], v[1])),
        ("matmul", &[&[3, 4], &[4, 2]], (-3.0, 3.0), 5, |g, v| g.matmul(v[0], v[1])),
        ("matmul batched", &[&[2, 3, 4], &[2, 4, 2]], (-3.0, 3.0), 4, |g, v| g.matmul(v[0], v[1])),
        ("sigmoid", &[&[6]], (-4.0, 4.0), 6, |g, v| g.sigmoid(v[0])),
        ("tanh", &[&[6]], (-3.0, 3.0), 5, |g, v| g.tanh(v[0])),
        ("exp", &[&[6]], (-3.0, 3.0), 4, |g, v| g.exp(v[0])),
        ("log", &[&[6]], (0.2, 3.0), 4, |g, v| g.log(v[0])),
        ("abs", &[&[6]], (0.1, 3.0), 3, |g, v| g.abs(v[0])),
        ("softmax", &[&[3, 5]], (-3.0, 3.0), 5, |g, v| g.softmax(v[0])),
        ("log_softmax", &[&[3, 5]], (-3.0, 3.0), 5, |g, v| g.log_softmax(v[0])),
        ("layer_norm", &[&[3, 6]], (-3.0, 3.0), 5, |g, v| g.layer_norm(v[0], 1e-5)),
        ("mean", &[&[2, 3]], (-3.0, 3.0), 3, |g, v| g.mean(v[0])),
        ("sum_last", &[&[2, 3, 4]], (-3.0, 3.0), 3, |g, v| g.sum_last(v[0])),
        ("l2_norm", &[&[7]], (-3.0, 3.0), 4, |g, v| g.l2_norm(v[0])),
        ("normalize_rows", &[&[3, 4]], (-3.0, 3.0), 5, |g, v| g.normalize_rows(v[0])),
        ("concat", &[&[2, 3, 4], &[2, 1, 4]], (-3.0, 3.0), 3, |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", &[&[2, 5, 3]], (-3.0, 3.0), 3, |g, v| g.slice(v[0], 1, 1, 3)),
        ("transpose", &[&[2, 3, 4]], (-3.0, 3.0), 3, |g, v| g.transpose_last(v[0])),
        ("broadcast_to", &[&[3, 1]], (-3.0, 3.0), 4, |g, v| g.broadcast_to(v[0], &[2, 3, 4])),
    ];
    let start = Instant::now();
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for (name, shapes, range, n, build) in ops {
        let (c, w) = op_cases(shapes, range, n, build)?;
        check(w < FD_TOL, || format!("{name}: relative error {w:.2e}"))?;
        cases += c;
        worst = worst.max(w);
    }
    let mut model_worst: f64 = 0.0;
    for seed in 0..4 {
        let w = gated_model_case(seed)?;
        check(w < FD_TOL, || format!("gated model seed {seed}: relative error {w:.2e}"))?;
        model_worst = model_worst.max(w);
        cases += 1;
    }
    let elapsed = start.elapsed();
    check(cases >= 100, || format!("only {cases} cases"))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{cases} cases, worst primitive {worst:.1e}, worst full model {model_worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- A2

/// Norm of d(gated token)/d(logit), assembled one output element at a time.
fn jacobian_norm(logit: f64, token: &[f64]) -> f64 {
    let n = token.len();
    let set = GateSet {
        length: Some(Parameter::new("gate", ParamGroup::Gate, Tensor::full(&[1, 1], logit))),
        depth: None,
        tau: 1.0,
    };
    let mut sq = 0.0;
    for j in 0..n {
        let g = Graph::new();
        let bound = set.bind(&g).unwrap();
        let p = g.constant(Tensor::new(vec![1, n], token.to_vec()).unwrap()).unwrap();
        let (out, _) = apply_length_gate(&g, p, &bound, 0, GatingStrategy::PerToken, None).unwrap();
        let pick = g.slice(out, 1, j, 1).unwrap();
        let loss = g.sum(pick).unwrap();
        let d = g.backward(loss).unwrap().get("gate").unwrap().data()[0];
        sq += d * d;
    }
    sq.sqrt()
}

fn a2() -> Outcome {
    let mut r = rng::stream(2, "a2");
    let mut saturated = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_saturated: f64 = 0.0;
    for i in 0..10_000 {
        let logit = r.random_range(-15.0..15.0);
        let dim = r.random_range(1..=8);
        let token: Vec<f64> = (0..dim).map(|_| r.random_range(-5.0..5.0)).collect();
        let norm = token.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let jac = jacobian_norm(logit, &token);
        let ratio = jac / norm;
        check(ratio <= 0.25 + 1e-15, || format!("case {i}: ratio {ratio} at logit {logit}"))?;
        worst_ratio = worst_ratio.max(ratio);
        let s = sigmoid(logit);
        if !(0.001..=0.999).contains(&s) {
            saturated += 1;
            check(ratio < 1e-3, || format!("case {i}: saturated ratio {ratio} at logit {logit}"))?;
            worst_saturated = worst_saturated.max(ratio);
        }
    }
    check(saturated > 1000, || format!("only {saturated} saturated cases"))?;
    Ok(format!(
        "10000 cases, max ratio {worst_ratio:.4}, {saturated} saturated with max ratio {worst_saturated:.1e}"
    ))
}

// ---------------------------------------------------------------- runs

struct Runs {
    root: PathBuf,
}

impl Runs {
    fn run(&self, label: &str, cfg: &RunConfig) -> Result<(RunResult, Vec<TrainingTrace>, Duration), String> {
        let dir = self.root.join(label);
        let start = Instant::now();
        let result = experiment::run(&cfg.clone(), &RunOptions { out_dir: dir.clone(), jobs: 1 }).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let traces = result
            .seeds
            .iter()
            .map(|s| TrainingTrace::read(&dir.join(&s.trace_file)))
            .collect::<gatelab::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        Ok((result, traces, elapsed))
    }

    fn dir(&self, label: &str) -> PathBuf {
        self.root.join(label)
    }
}

fn config(overrides: &str) -> RunConfig {
    RunConfig::from_toml_str(&format!("run.seeds = [1, 2, 3]\n{overrides}")).expect("acceptance config")
}

fn verdicts(traces: &[TrainingTrace]) -> Result<Vec<&CollapseVerdict>, String> {
    traces
        .iter()
        .map(|t| t.verdict.as_ref().ok_or_else(|| format!("seed {} has no verdict", t.meta.seed)))
        .collect()
}

fn describe(v: &[&CollapseVerdict]) -> String {
    v.iter()
        .map(|v| {
            format!(
                "{}(gap {}, applied {}, flat {:.1e}, drift {:.1e})",
                v.verdict.as_str(),
                v.gap.map_or("n/a".into(), |g| format!("{:.2}", g.median)),
                v.applied_gap.map_or("n/a".into(), |g| format!("{:.2}", g.mean)),
                v.flatness,
                v.drift
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Baseline {
    gap_mean: f64,
    h_mean: Option<f64>,
}

fn a3(runs: &Runs, base: &mut Option<Baseline>) -> Outcome {
    let cfg = config("");
    let (result, traces, elapsed) = runs.run("a3", &cfg)?;
    let v = verdicts(&traces)?;
    let detail = describe(&v);
    for (s, v) in result.seeds.iter().zip(&v) {
        check(s.steps >= 500, || format!("seed {}: {} steps", s.seed, s.steps))?;
        let gap = v.gap.ok_or_else(|| format!("seed {}: no gate signal", s.seed))?;
        check(gap.median >= 1.5, || format!("seed {}: median gap {:.3}; {detail}", s.seed, gap.median))?;
        check(v.flatness < 0.01, || format!("seed {}: flatness {:.3e}; {detail}", s.seed, v.flatness))?;
        check(v.drift < 0.02, || format!("seed {}: drift {:.3e}; {detail}", s.seed, v.drift))?;
        check(v.verdict == Verdict::Collapsed, || format!("seed {}: {detail}", s.seed))?;
    }
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    *base = Some(Baseline {
        gap_mean: mean(v.iter().filter_map(|v| v.gap.map(|g| g.mean))),
        h_mean: result.h_mean,
    });
    Ok(format!("{detail}; {:.0}s", elapsed.as_secs_f64()))
}

fn a4(runs: &Runs, base: &Option<Baseline>) -> Outcome {
    let base = base.as_ref().ok_or("needs the A3 runs")?;
    let repairs = [
        ("a4-lr50", "optimizer.gate_lr_multiplier = 50.0\n"),
        ("a4-clip", "optimizer.clip_max_norm = 1.0\n"),
        (
            "a4-equilibrium",
            "optimizer.equilibrium.enabled = true\noptimizer.equilibrium.eps = 1e-8\noptimizer.equilibrium.max_scale = 10.0\n",
        ),
    ];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut reduction = None;
    for (label, overrides) in repairs {
        let (_, traces, _) = runs.run(label, &config(overrides))?;
        let v = verdicts(&traces)?;
        let all_collapsed = v.iter().all(|v| v.verdict == Verdict::Collapsed);
        if !all_collapsed {
            failures.push(format!("{label} not collapsed for every seed"));
        }
        if label == "a4-equilibrium" {
            let applied = mean(v.iter().filter_map(|v| v.applied_gap.map(|g| g.mean)));
            let drop = base.gap_mean - applied;
            if drop < 0.3 {
                failures.push(format!("equilibrium reduced the gap by only {drop:.3}"));
            }
            reduction = Some(drop);
        }
        lines.push(format!("{label}: {}", describe(&v)));
    }
    let summary = format!(
        "{}; gap reduction {}",
        lines.join("; "),
        reduction.map_or("n/a".into(), |d| format!("{d:.2}"))
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn a5(runs: &Runs, base: &Option<Baseline>) -> Outcome {
    let per_token = base.as_ref().ok_or("needs the A3 runs")?.h_mean;
    let mut hs = vec![("per-token", per_token)];
    for strategy in ["fixed-all-on", "per-layer"] {
        let (result, _, _) = runs.run(&format!("a5-{strategy}"), &config(&format!("variant.strategy = \"{strategy}\"\n")))?;
        hs.push((strategy, result.h_mean));
    }
    let values: Vec<f64> = hs
        .iter()
        .map(|(s, h)| h.ok_or_else(|| format!("{s}: no harmonic mean")))
        .collect::<Result<_, _>>()?;
    let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
    let detail = hs
        .iter()
        .zip(&values)
        .map(|((s, _), h)| format!("{s} {h:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(spread <= 1.0, || format!("spread {spread:.2}: {detail}"))?;
    Ok(format!("{detail}; spread {spread:.2}"))
}

// ---------------------------------------------------------------- A6, A7

fn a6() -> Outcome {
    let s1 = sigmoid(1.0);
    check((s1 - 0.7310586).abs() <= 1e-6, || format!("sigmoid(1) = {s1}"))?;

    let cfg = EncoderConfig::default();
    let enc = FrozenEncoder::new(cfg.clone()).map_err(|e| e.to_string())?;
    let model = build_variant(&VariantSpec::default(), &cfg, 1).map_err(|e| e.to_string())?;
    let classes = enc.class_inputs(&[0, 1]).map_err(|e| e.to_string())?;
    let patches = rng::gaussian(&mut rng::stream(6, "a6"), &[1, cfg.n_patch_tokens, cfg.vision_width], 1.0);
    let mut masks = rng::stream(6, "masks");
    let out = model
        .forward(&Graph::new(), &enc, &classes, &patches, Mode::Train(&mut masks))
        .map_err(|e| e.to_string())?;
    let expected = cfg.max_prompt_len as f64 * s1;
    for l in &out.gates.l_eff {
        check((l - expected).abs() < 1e-12, || format!("initial L_eff {l}, expected {expected}"))?;
    }

    let eq = EquilibriumConfig {
        enabled: true,
        eps: 1e-8,
        max_scale: 10.0,
    };
    let at_zero = equilibrium_factor(0.0, &eq);
    check((at_zero - 4.0).abs() <= 1e-6, || format!("equilibrium factor at 0 = {at_zero}"))?;
    let saturated = equilibrium_factor((0.99f64 / 0.01).ln(), &eq);
    check(saturated == 10.0, || format!("factor at sigmoid 0.99 = {saturated}, cap not engaged"))?;

    let h1 = harmonic_mean(83.87, 57.65).map_err(|e| e.to_string())?;
    let h2 = harmonic_mean(77.07, 70.43).map_err(|e| e.to_string())?;
    check((h1 - 68.33).abs() <= 0.01, || format!("harmonic mean {h1}"))?;
    check((h2 - 73.60).abs() <= 0.01, || format!("harmonic mean {h2}"))?;
    Ok(format!(
        "sigmoid(1) {s1:.7}, L_eff {:.5}, factor(0) {at_zero:.6}, capped {saturated}, H {h1:.2} / {h2:.2}",
        out.gates.l_eff[0]
    ))
}

fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |i: usize, j: usize| {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let a = sums[labels[i]] / counts[labels[i]] as f64;
        let b = (0..3)
            .filter(|&c| c != labels[i])
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

fn a7() -> Outcome {
    let mut r = rng::stream(7, "a7");
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let points: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..4).map(|k| r.random_range(-1.0..1.0) + if k == l { 2.0 } else { 0.0 }).collect())
        .collect();
    let (s, _) = silhouette(&points, &labels).map_err(|e| e.to_string())?;
    let oracle = silhouette_oracle(&points, &labels);
    check((s - oracle).abs() < 1e-12, || format!("silhouette {s} vs oracle {oracle}"))?;

    let draws: Vec<Vec<f64>> = (0..10_000).map(|_| rng::gaussian(&mut r, &[16], 1.0).into_data()).collect();
    let rate = cancellation_rate_of(&draws).map_err(|e| e.to_string())?;
    check((rate - 0.5).abs() <= 0.02, || format!("cancellation rate {rate}"))?;

    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (b, c) = (1 + case % 4, 2 + case % 7);
        let logits: Vec<f64> = (0..b * c).map(|_| r.random_range(-10.0..10.0)).collect();
        let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![b, c], logits.clone()).unwrap()).unwrap();
        let ours = g.item(classification_loss(&g, x, &targets, 0.0).map_err(|e| e.to_string())?).unwrap();
        let oracle = logits
            .chunks(c)
            .zip(&targets)
            .map(|(row, &t)| {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
            })
            .sum::<f64>()
            / b as f64;
        worst = worst.max((ours - oracle).abs());
    }
    check(worst < 1e-12, || format!("cross-entropy differs from log-sum-exp by {worst:.2e}"))?;
    Ok(format!(
        "silhouette {s:.6} (oracle diff {:.1e}), cancellation {rate:.4}, cross-entropy max diff {worst:.1e}",
        (s - oracle).abs()
    ))
}

// ---------------------------------------------------------------- A8, A9

fn checksum(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn a8(runs: &Runs) -> Outcome {
    let trace = experiment::trace_file_name(1);
    let first = runs.dir("a3").join(&trace);
    let cfg = config("").with_overrides([("run.seeds", serde_json::json!([1]))]).unwrap();
    runs.run("a8", &cfg)?;
    let (a, b) = (checksum(&first)?, checksum(&runs.dir("a8").join(&trace))?);
    check(a == b, || format!("checksums differ: {a} vs {b}"))?;
    Ok(format!("sha256 {}", &a[..16]))
}

fn a9(runs: &Runs) -> Outcome {
    let enc_cfg = EncoderConfig::default();
    let build = |kind| build_variant(&VariantSpec::of(kind), &enc_cfg, 1).map_err(|e| e.to_string());
    let matched = count_parameters(&build(VariantKind::ParamMatched)?).total;
    let adaptive = count_parameters(&build(VariantKind::AdaptiveBimaple)?).total;
    check(matched == adaptive, || format!("param-matched {matched} vs adaptive {adaptive}"))?;

    let one_seed = |kind: &str| {
        RunConfig::from_toml_str(&format!("run.seeds = [1]\nvariant.kind = \"{kind}\"\n")).expect("acceptance config")
    };
    let (_, frozen, _) = runs.run("a9-frozen", &one_seed("always-frozen"))?;
    let steps = frozen[0].records.len();
    for r in &frozen[0].records {
        check(r.grad_norm.gate == 0.0, || format!("step {}: gate gradient norm {}", r.step, r.grad_norm.gate))?;
    }

    let enc = FrozenEncoder::new(enc_cfg.clone()).map_err(|e| e.to_string())?;
    let mut model = build(VariantKind::CocoopGated)?;
    let heads = model.cocoop.as_mut().and_then(|c| c.heads.as_mut()).ok_or("cocoop-gated has no gate heads")?;
    heads[0].value = rng::gaussian(&mut rng::stream(9, "a9-w"), heads[0].value.shape(), 1.0);
    let classes = enc.class_inputs(&[0, 1]).map_err(|e| e.to_string())?;
    let patches = rng::gaussian(&mut rng::stream(9, "a9-x"), &[8, enc_cfg.n_patch_tokens, enc_cfg.vision_width], 1.0);
    let out = model
        .forward(&Graph::new(), &enc, &classes, &patches, Mode::Infer)
        .map_err(|e| e.to_string())?;
    let l = out.gates.per_input_l_eff.ok_or("no per-input effective length")?;
    let m = mean(l.iter().copied());
    let var = mean(l.iter().map(|x| (x - m) * (x - m)));
    check(var > 0.0, || "per-input L_eff is constant with nonzero heads".into())?;

    let (result, _, _) = runs.run("a9-cocoop", &one_seed("cocoop-gated"))?;
    let context = VariantSpec::default().context_len as f64;
    let spread = result.seeds[0].instance_l_eff.ok_or("no per-input summary")?;
    check(spread.std < 0.01 * context, || format!("trained per-input L_eff std {:.3e}", spread.std))?;
    Ok(format!(
        "{matched} elements both, {steps} frozen steps with zero gate gradient, untrained variance {var:.2e}, trained std {:.1e} (mean {:.3} of {context})",
        spread.std, spread.mean
    ))
}

// ---------------------------------------------------------------- main

fn report(id: &str, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("{id} PASS {title}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("{id} FAIL {title}: {detail} [{secs:.1}s]");
            false
        }
    }
}

type Criterion<'a> = (&'static str, &'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // Cargo passes libtest flags; only a listing request needs handling.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // Bare arguments select criteria by id, e.g. `-- A1 A6`. A4 and A5
    // reuse the A3 runs and A8 reruns one of them.
    let filters: Vec<String> = args.into_iter().filter(|a| !a.starts_with('-')).map(|a| a.to_uppercase()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let runs = Runs {
        root: tmp.path().to_path_buf(),
    };
    let baseline = RefCell::new(None);
    let criteria: Vec<Criterion> = vec![
        ("A1", "gradient correctness", Box::new(a1)),
        ("A2", "attenuation bound", Box::new(a2)),
        ("A3", "collapse reproduction", Box::new(|| a3(&runs, &mut baseline.borrow_mut()))),
        ("A4", "repair futility", Box::new(|| a4(&runs, &baseline.borrow()))),
        ("A5", "strategy equivalence", Box::new(|| a5(&runs, &baseline.borrow()))),
        ("A6", "formula spot checks", Box::new(a6)),
        ("A7", "oracle equivalence", Box::new(a7)),
        ("A8", "determinism", Box::new(|| a8(&runs))),
        ("A9", "variant audits", Box::new(|| a9(&runs))),
    ];
    let mut passed = 0;
    let mut failed = 0;
    for (id, title, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == id) {
            continue;
        }
        if report(id, title, f) {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

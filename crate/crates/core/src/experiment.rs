//! Runs, sweeps and offline analysis with on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbone::FrozenEncoder;
use crate::config::{sanitize, RunConfig, Sweep};
use crate::data::{self, Sample};
use crate::diagnostics::{
    detect_collapse, gate_behavior_series, magnitude_gap, magnitude_gap_of, CollapseVerdict, GapStats, GateSignal,
    RepresentationMetrics, StepRecord, TrainingTrace, Verdict,
};
use crate::error::{LabError, Result};
use crate::gating::GatingStrategy;
use crate::train::{measure_flops, train_seed, SeedOutcome, Summary};
use crate::variant::{build_variant, count_parameters, ParameterAudit, VariantKind, VariantSpec};

pub const RESULT_FILE: &str = "result.json";
pub const REPORT_FILE: &str = "report.md";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads shared by seeds (and cells, for sweeps).
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub h_mean: Option<f64>,
    /// Base and novel accuracy with soft depth weights (deep-gated kinds).
    pub relaxed_acc: Option<(f64, f64)>,
    pub steps: usize,
    /// Relative to the run directory.
    pub trace_file: String,
    pub verdict: Option<Verdict>,
    pub representation: Option<RepresentationMetrics>,
    pub instance_l_eff: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub base: VariantKind,
    pub base_trainable: usize,
    pub extra_trainable: usize,
    /// Extra trainable elements relative to the base assembly.
    pub param_ratio: f64,
    pub flops_per_step: u64,
    pub base_flops_per_step: u64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub variant: VariantKind,
    pub strategy: GatingStrategy,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub mean_base: f64,
    pub mean_novel: f64,
    /// Harmonic mean of the seed-averaged accuracies.
    pub h_mean: Option<f64>,
    pub audit: ParameterAudit,
    pub overhead: Option<Overhead>,
}

impl RunResult {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Verdicts of every seed, `None` for gate-free variants.
    pub fn verdicts(&self) -> Vec<Option<Verdict>> {
        self.seeds.iter().map(|s| s.verdict).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AbortRecord {
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub reason: String,
    pub last_steps: Vec<StepRecord>,
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every item was processed"))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.jsonl")
}

fn write_plots(dir: &Path, trace: &TrainingTrace) -> Result<()> {
    let plots = dir.join("plots");
    create_dir(&plots)?;
    let seed = trace.meta.seed;
    let mut norms = String::from("step\tprompt\tgate\tcoupling\tgate_net\tgate_applied\n");
    for r in &trace.records {
        let n = &r.grad_norm;
        writeln!(
            norms,
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            r.step, n.prompt, n.gate, n.coupling, n.gate_net, n.gate_applied
        )
        .expect("writing to a string");
    }
    write(&plots.join(format!("seed{seed}_grad_norm.tsv")), &norms)?;
    for (file, pick) in [
        ("l_eff", (|r: &StepRecord| &r.l_eff) as fn(&StepRecord) -> &Vec<f64>),
        ("depth", |r: &StepRecord| &r.depth_act),
    ] {
        let width = trace.records.iter().map(|r| pick(r).len()).max().unwrap_or(0);
        let mut out = String::from("step");
        for d in 0..width {
            write!(out, "\tlayer{d}").expect("writing to a string");
        }
        out.push('\n');
        for r in &trace.records {
            write!(out, "{}", r.step).expect("writing to a string");
            for v in pick(r) {
                write!(out, "\t{v}").expect("writing to a string");
            }
            out.push('\n');
        }
        write(&plots.join(format!("seed{seed}_{file}.tsv")), &out)?;
    }
    Ok(())
}

fn seed_result(o: &SeedOutcome) -> SeedResult {
    SeedResult {
        seed: o.seed,
        base_acc: o.base_acc,
        novel_acc: o.novel_acc,
        h_mean: o.h_mean,
        relaxed_acc: o.relaxed_acc,
        steps: o.steps,
        trace_file: trace_file_name(o.seed),
        verdict: o.trace.verdict.as_ref().map(|v| v.verdict),
        representation: o.representation,
        instance_l_eff: o.instance_l_eff,
    }
}

fn overhead(cfg: &RunConfig, enc: &FrozenEncoder, audit: &ParameterAudit) -> Result<Option<Overhead>> {
    let Some(base) = cfg.variant.kind.base() else {
        return Ok(None);
    };
    let seed = cfg.run.seeds[0];
    let model = build_variant(&cfg.variant, enc.config(), seed)?;
    let base_spec = VariantSpec {
        kind: base,
        ..cfg.variant.clone()
    };
    let base_model = build_variant(&base_spec, enc.config(), seed)?;
    let base_audit = count_parameters(&base_model);
    let dataset = data::generate(&cfg.task, enc, seed)?;
    let classes = enc.class_inputs(&dataset.base_classes)?;
    let n = cfg.optimizer.batch_size.min(dataset.base_train.len());
    let batch: Vec<&Sample> = dataset.base_train[..n].iter().collect();
    let flops = measure_flops(&model, enc, &classes, &batch, seed)?;
    let base_flops = measure_flops(&base_model, enc, &classes, &batch, seed)?;
    let extra = audit.trainable.saturating_sub(base_audit.trainable);
    Ok(Some(Overhead {
        base,
        base_trainable: base_audit.trainable,
        extra_trainable: extra,
        param_ratio: extra as f64 / base_audit.trainable.max(1) as f64,
        flops_per_step: flops,
        base_flops_per_step: base_flops,
        flops_ratio: flops as f64 / base_flops.max(1) as f64,
    }))
}

/// Trains every seed of `cfg`, writing traces, plots, `result.json`,
/// `config.toml` and `report.md` into `opts.out_dir`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let dir = &opts.out_dir;
    create_dir(dir)?;
    let hash = cfg.hash();
    write(
        &dir.join(CONFIG_FILE),
        &format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml_string()),
    )?;
    let enc = FrozenEncoder::new(cfg.encoder.clone())?;
    log::info!(
        "run `{}`: {} on {} seed(s) -> {}",
        cfg.run.name,
        cfg.variant.kind,
        cfg.run.seeds.len(),
        dir.display()
    );
    let outcomes = parallel_map(&cfg.run.seeds, opts.jobs, |&seed| {
        let r = train_seed(cfg, &enc, seed);
        match &r {
            Ok(o) => log::info!("seed {seed}: base {:.2} novel {:.2}", o.base_acc, o.novel_acc),
            Err(e) => log::error!("seed {seed}: {e}"),
        }
        r
    });

    let mut seeds = Vec::new();
    let mut traces = Vec::new();
    let mut failure = None;
    for (&seed, outcome) in cfg.run.seeds.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                o.trace.write(&dir.join(trace_file_name(seed)))?;
                write_plots(dir, &o.trace)?;
                seeds.push(seed_result(&o));
                traces.push(o.trace);
            }
            Err(LabError::Numerical {
                step,
                reason,
                last_steps,
            }) => {
                let record = AbortRecord {
                    config_hash: hash.clone(),
                    seed,
                    step,
                    reason: reason.clone(),
                    last_steps: last_steps.clone(),
                };
                write(
                    &dir.join(format!("abort_seed{seed}.json")),
                    &serde_json::to_string_pretty(&record)?,
                )?;
                failure.get_or_insert(LabError::Numerical {
                    step,
                    reason: format!("seed {seed}: {reason}"),
                    last_steps,
                });
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let model = build_variant(&cfg.variant, enc.config(), cfg.run.seeds[0])?;
    let audit = count_parameters(&model);
    let overhead = overhead(cfg, &enc, &audit)?;
    let mean_base = seeds.iter().map(|s| s.base_acc).sum::<f64>() / seeds.len() as f64;
    let mean_novel = seeds.iter().map(|s| s.novel_acc).sum::<f64>() / seeds.len() as f64;
    let result = RunResult {
        name: cfg.run.name.clone(),
        variant: cfg.variant.kind,
        strategy: cfg.variant.strategy,
        config_hash: hash,
        seeds,
        mean_base,
        mean_novel,
        h_mean: data::harmonic_mean(mean_base, mean_novel).ok(),
        audit,
        overhead,
    };
    write(&dir.join(RESULT_FILE), &serde_json::to_string_pretty(&result)?)?;
    write(&dir.join(REPORT_FILE), &render_report(&result, &traces)?)?;
    Ok(result)
}

/// Rebuilds `report.md` of a finished run from its result and traces.
pub fn report(dir: &Path) -> Result<String> {
    let result = RunResult::load(dir)?;
    let traces = result
        .seeds
        .iter()
        .map(|s| TrainingTrace::read(&dir.join(&s.trace_file)))
        .collect::<Result<Vec<_>>>()?;
    let text = render_report(&result, &traces)?;
    write(&dir.join(REPORT_FILE), &text)?;
    Ok(text)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn recompute(trace: &TrainingTrace) -> Result<Option<CollapseVerdict>> {
    if trace.meta.gate_layout.is_empty() {
        return Ok(None);
    }
    let thresholds = trace.verdict.as_ref().map(|v| v.thresholds).unwrap_or_default();
    match detect_collapse(trace, &thresholds) {
        Ok(v) => Ok(Some(v)),
        Err(LabError::ShortTrace(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Markdown summary. Gradient statistics are recomputed from the traces.
pub fn render_report(result: &RunResult, traces: &[TrainingTrace]) -> Result<String> {
    let mut md = String::new();
    let w = &mut md;
    let line = "writing to a string";
    writeln!(w, "# {}\n", result.name).expect(line);
    writeln!(w, "- variant: `{}`", result.variant).expect(line);
    if result.variant.has_deep_gates() {
        writeln!(w, "- gating strategy: `{}`", result.strategy.as_str()).expect(line);
    }
    writeln!(w, "- config hash: `{}`", result.config_hash).expect(line);
    writeln!(w, "- seeds: {}\n", result.seeds.len()).expect(line);

    writeln!(w, "## Accuracy\n").expect(line);
    writeln!(w, "| seed | base | novel | H |").expect(line);
    writeln!(w, "|---|---|---|---|").expect(line);
    for s in &result.seeds {
        writeln!(
            w,
            "| {} | {:.2} | {:.2} | {} |",
            s.seed,
            s.base_acc,
            s.novel_acc,
            fmt_opt(s.h_mean, 2)
        )
        .expect(line);
    }
    writeln!(
        w,
        "| mean | {:.2} | {:.2} | {} |\n",
        result.mean_base,
        result.mean_novel,
        fmt_opt(result.h_mean, 2)
    )
    .expect(line);
    let relaxed: Vec<_> = result
        .seeds
        .iter()
        .filter_map(|s| s.relaxed_acc.map(|a| (s.seed, a)))
        .collect();
    if !relaxed.is_empty() {
        writeln!(w, "With the soft depth weights used in training instead of thresholded insertion:\n").expect(line);
        writeln!(w, "| seed | base | novel |").expect(line);
        writeln!(w, "|---|---|---|").expect(line);
        for (seed, (b, n)) in relaxed {
            writeln!(w, "| {seed} | {b:.2} | {n:.2} |").expect(line);
        }
        writeln!(w).expect(line);
    }

    writeln!(w, "## Gradient flow and gate behavior\n").expect(line);
    writeln!(
        w,
        "| seed | steps | gap mean | gap median | applied gap | flatness | drift | saturation | cancellation | verdict |"
    )
    .expect(line);
    writeln!(w, "|---|---|---|---|---|---|---|---|---|---|").expect(line);
    for trace in traces {
        let gap = match magnitude_gap(trace) {
            Ok(g) => Some(g),
            Err(LabError::NoGateSignal) => None,
            Err(e) => return Err(e),
        };
        let applied = magnitude_gap_of(trace, GateSignal::Applied).ok();
        let v = recompute(trace)?;
        let cancellation = v.as_ref().map_or_else(
            || "n/a".to_string(),
            |v| {
                v.cancellation
                    .iter()
                    .map(|(k, r)| format!("{k} {r:.2}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            },
        );
        writeln!(
            w,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            trace.meta.seed,
            trace.records.last().map_or(0, |r| r.step + 1),
            fmt_opt(gap.map(|g: GapStats| g.mean), 3),
            fmt_opt(gap.map(|g| g.median), 3),
            fmt_opt(applied.map(|g| g.mean), 3),
            fmt_opt(v.as_ref().map(|v| v.flatness), 5),
            fmt_opt(v.as_ref().map(|v| v.drift), 5),
            fmt_opt(v.as_ref().map(|v| v.saturation), 3),
            cancellation,
            v.as_ref().map_or("n/a", |v| v.verdict.as_str()),
        )
        .expect(line);
    }
    if let Some(trace) = traces.first() {
        let series = gate_behavior_series(trace);
        if !series.l_eff.is_empty() {
            let finals: Vec<String> = series
                .l_eff
                .iter()
                .map(|s| format!("{:.4}", s.last().copied().unwrap_or(f64::NAN)))
                .collect();
            writeln!(
                w,
                "\nFinal effective length per layer (seed {}): {}",
                trace.meta.seed,
                finals.join(", ")
            )
            .expect(line);
        }
        if !series.depth.is_empty() {
            let finals: Vec<String> = series
                .depth
                .iter()
                .map(|s| format!("{:.4}", s.last().copied().unwrap_or(f64::NAN)))
                .collect();
            writeln!(w, "\nFinal depth weights (seed {}): {}", trace.meta.seed, finals.join(", ")).expect(line);
        }
    }

    let instance: Vec<_> = result
        .seeds
        .iter()
        .filter_map(|s| s.instance_l_eff.map(|l| (s.seed, l)))
        .collect();
    if !instance.is_empty() {
        writeln!(w, "\n## Per-input effective length\n").expect(line);
        writeln!(w, "| seed | mean | std | min | max |").expect(line);
        writeln!(w, "|---|---|---|---|---|").expect(line);
        for (seed, l) in instance {
            writeln!(
                w,
                "| {seed} | {:.4} | {:.2e} | {:.4} | {:.4} |",
                l.mean, l.std, l.min, l.max
            )
            .expect(line);
        }
    }

    writeln!(w, "\n## Representation (base test split)\n").expect(line);
    writeln!(w, "| seed | alignment | silhouette | separation |").expect(line);
    writeln!(w, "|---|---|---|---|").expect(line);
    for s in &result.seeds {
        if let Some(r) = s.representation {
            writeln!(
                w,
                "| {} | {:.4} | {:.4} | {:.4} |",
                s.seed, r.alignment, r.silhouette, r.separation
            )
            .expect(line);
        }
    }

    writeln!(w, "\n## Parameters\n").expect(line);
    writeln!(w, "| group | elements |").expect(line);
    writeln!(w, "|---|---|").expect(line);
    for (group, n) in &result.audit.per_group {
        writeln!(w, "| {group} | {n} |").expect(line);
    }
    writeln!(
        w,
        "\nTrainable {} of {} ({} frozen).",
        result.audit.trainable, result.audit.total, result.audit.frozen
    )
    .expect(line);
    if let Some(o) = &result.overhead {
        writeln!(
            w,
            "Against `{}`: {} extra trainable elements ({:.2}%), {:.3}x matmul FLOPs per step.",
            o.base,
            o.extra_trainable,
            100.0 * o.param_ratio,
            o.flops_ratio
        )
        .expect(line);
    }
    Ok(md)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub trace: PathBuf,
    pub config_hash: String,
    pub variant: VariantKind,
    pub steps: usize,
    pub gap: Option<GapStats>,
    pub applied_gap: Option<GapStats>,
    pub final_l_eff: Vec<f64>,
    pub final_depth: Vec<f64>,
    pub recomputed: Option<CollapseVerdict>,
    pub embedded: Option<Verdict>,
    /// False when the recomputed verdict differs from the embedded one.
    pub consistent: bool,
    /// Whether the trace hash matches a `config.toml` beside it, if any.
    pub hash_matches: Option<bool>,
}

pub fn diagnostics_path(trace: &Path) -> PathBuf {
    trace.with_extension("diagnostics.json")
}

fn sibling_hash(trace: &Path) -> Option<String> {
    let cfg = trace.parent()?.join(CONFIG_FILE);
    if !cfg.is_file() {
        return None;
    }
    match RunConfig::load(&cfg) {
        Ok(c) => Some(c.hash()),
        Err(e) => {
            log::warn!("{}: {e}", cfg.display());
            None
        }
    }
}

/// Recomputes every metric of one trace and writes
/// `<trace>.diagnostics.json` next to it.
pub fn diagnose_trace(path: &Path) -> Result<DiagnosticsReport> {
    let trace = TrainingTrace::read(path)?;
    let optional = |r: Result<GapStats>| match r {
        Ok(g) => Ok(Some(g)),
        Err(LabError::NoGateSignal) => Ok(None),
        Err(e) => Err(e),
    };
    let gap = optional(magnitude_gap(&trace))?;
    let applied_gap = optional(magnitude_gap_of(&trace, GateSignal::Applied))?;
    let recomputed = recompute(&trace)?;
    let consistent = match &trace.verdict {
        Some(embedded) => recomputed.as_ref() == Some(embedded),
        None => true,
    };
    if !consistent {
        log::error!(
            "{}: recomputed verdict {:?} disagrees with the embedded {:?}",
            path.display(),
            recomputed.as_ref().map(|v| v.verdict),
            trace.verdict.as_ref().map(|v| v.verdict)
        );
    }
    let hash_matches = sibling_hash(path).map(|h| h == trace.meta.config_hash);
    if hash_matches == Some(false) {
        log::warn!("{}: config hash differs from the config.toml beside it", path.display());
    }
    let last = trace.records.last();
    let report = DiagnosticsReport {
        trace: path.to_path_buf(),
        config_hash: trace.meta.config_hash.clone(),
        variant: trace.meta.variant,
        steps: trace.records.len(),
        gap,
        applied_gap,
        final_l_eff: last.map(|r| r.l_eff.clone()).unwrap_or_default(),
        final_depth: last.map(|r| r.depth_act.clone()).unwrap_or_default(),
        recomputed,
        embedded: trace.verdict.as_ref().map(|v| v.verdict),
        consistent,
        hash_matches,
    };
    write(&diagnostics_path(path), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn diagnose(paths: &[PathBuf]) -> Result<Vec<DiagnosticsReport>> {
    paths.iter().map(|p| diagnose_trace(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub dir: PathBuf,
    pub result: RunResult,
}

fn verdict_counts(r: &RunResult) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in r.verdicts() {
        *counts.entry(v.map_or("n/a", Verdict::as_str)).or_default() += 1;
    }
    counts
        .iter()
        .map(|(k, n)| format!("{k} x{n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn collapse_means(dir: &Path, r: &RunResult) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let mut gaps = Vec::new();
    let mut flat = Vec::new();
    let mut drift = Vec::new();
    for s in &r.seeds {
        let trace = TrainingTrace::read(&dir.join(&s.trace_file))?;
        if let Some(v) = recompute(&trace)? {
            if let Some(g) = v.gap {
                gaps.push(g.mean);
            }
            flat.push(v.flatness);
            drift.push(v.drift);
        }
    }
    let avg = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok((avg(&gaps), avg(&flat), avg(&drift)))
}

const SUMMARY_COLUMNS: [&str; 11] = [
    "cell",
    "variant",
    "strategy",
    "base",
    "novel",
    "h_mean",
    "verdicts",
    "gap_mean",
    "flatness",
    "drift",
    "trainable",
];

/// Aggregated comparison table as `(tsv, markdown)`.
pub fn summary_tables(rows: &[SweepRow]) -> Result<(String, String)> {
    let mut tsv = SUMMARY_COLUMNS.join("\t");
    tsv.push('\n');
    let mut md = format!("| {} |\n|{}\n", SUMMARY_COLUMNS.join(" | "), "---|".repeat(SUMMARY_COLUMNS.len()));
    for row in rows {
        let r = &row.result;
        let (gap, flat, drift) = collapse_means(&row.dir, r)?;
        let cells = [
            row.label.clone(),
            r.variant.to_string(),
            r.strategy.as_str().to_string(),
            format!("{:.2}", r.mean_base),
            format!("{:.2}", r.mean_novel),
            fmt_opt(r.h_mean, 2),
            verdict_counts(r),
            fmt_opt(gap, 3),
            fmt_opt(flat, 5),
            fmt_opt(drift, 5),
            r.audit.trainable.to_string(),
        ];
        tsv.push_str(&cells.join("\t"));
        tsv.push('\n');
        md.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    Ok((tsv, md))
}

/// Runs every cell of `sweep` into `<out>/<cell>` and writes
/// `summary.tsv` and `summary.md`.
pub fn sweep(sweep: &Sweep, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    create_dir(&opts.out_dir)?;
    let cells = sweep.cells.len().max(1);
    let outer = opts.jobs.clamp(1, cells);
    let inner = (opts.jobs / outer).max(1);
    let results = parallel_map(&sweep.cells, outer, |(label, cfg)| {
        let dir = opts.out_dir.join(sanitize(label));
        run(
            cfg,
            &RunOptions {
                out_dir: dir.clone(),
                jobs: inner,
            },
        )
        .map(|result| SweepRow {
            label: label.clone(),
            dir,
            result,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (tsv, md) = summary_tables(&rows)?;
    write(&opts.out_dir.join("summary.tsv"), &tsv)?;
    write(
        &opts.out_dir.join("summary.md"),
        &format!("# {}\n\n{md}", sweep.name),
    )?;
    Ok(rows)
}


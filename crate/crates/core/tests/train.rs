use std::fs;

use gatelab::backbone::FrozenEncoder;
use gatelab::config::RunConfig;
use gatelab::diagnostics::TrainingTrace;
use gatelab::experiment::{self, AbortRecord, RunOptions, RunResult, CONFIG_FILE, REPORT_FILE, RESULT_FILE};
use gatelab::train::{train_seed, ABORT_WINDOW};
use gatelab::LabError;

/// Four base classes, two novel, three epochs of two steps each.
fn small(extra: &str) -> RunConfig {
    let text = format!(
        "task.n_base_classes = 4\ntask.n_novel_classes = 2\ntask.shots = 4\n\
         optimizer.epochs = 3\nrun.seeds = [5]\n{extra}"
    );
    RunConfig::from_toml_str(&text).unwrap()
}

fn train(cfg: &RunConfig) -> gatelab::Result<gatelab::train::SeedOutcome> {
    let enc = FrozenEncoder::new(cfg.encoder.clone()).unwrap();
    train_seed(cfg, &enc, cfg.run.seeds[0])
}

#[test]
fn short_run_traces_are_bit_identical() {
    let cfg = small("");
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.steps, 6);
    assert_eq!(a.trace.records.len(), 6);
    assert_eq!(a.trace.to_jsonl().unwrap(), b.trace.to_jsonl().unwrap());
    assert_eq!(a.base_acc, b.base_acc);
}

#[test]
fn recorded_effective_length_is_the_sum_of_activations() {
    let out = train(&small("")).unwrap();
    let n = out.trace.meta.n_max;
    for r in &out.trace.records {
        assert_eq!(r.gate_act.len(), r.l_eff.len() * n);
        for (d, l) in r.l_eff.iter().enumerate() {
            let sum: f64 = r.gate_act[d * n..(d + 1) * n].iter().sum();
            assert!((sum - l).abs() < 1e-12);
        }
        assert!((r.loss.resum(&small("").objective) - r.loss.total).abs() < 1e-9);
    }
    assert!(out.trace.verdict.is_some());
}

#[test]
fn record_every_thins_the_trace() {
    let out = train(&small("run.record_every = 2\n")).unwrap();
    assert_eq!(out.steps, 6);
    let steps: Vec<usize> = out.trace.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4]);
}

#[test]
fn ungated_variants_have_no_verdict() {
    let out = train(&small("variant.kind = \"maple\"\n")).unwrap();
    assert!(out.trace.verdict.is_none());
    assert!(out.relaxed_acc.is_none());
    assert!(out.trace.records.iter().all(|r| r.gate_grad.is_empty() && r.l_eff.is_empty()));
}

#[test]
fn always_frozen_gates_never_receive_gradient() {
    let out = train(&small("variant.kind = \"always-frozen\"\n")).unwrap();
    for r in &out.trace.records {
        assert_eq!(r.grad_norm.gate, 0.0);
        assert!(r.gate_grad.iter().all(|&g| g == 0.0));
        assert!(r.grad_norm.prompt > 0.0);
    }
    let first = &out.trace.records[0];
    assert!(out.trace.records.iter().all(|r| r.gate_act == first.gate_act));
}

#[test]
fn exploding_learning_rate_aborts_as_numerical() {
    let cfg = small("optimizer.base_lr = 1e300\n");
    match train(&cfg) {
        Err(LabError::Numerical { last_steps, .. }) => assert!(last_steps.len() <= ABORT_WINDOW),
        other => panic!("expected a numerical abort, got {:?}", other.map(|o| o.steps)),
    }

    let dir = tempfile::tempdir().unwrap();
    let err = experiment::run(
        &cfg,
        &RunOptions {
            out_dir: dir.path().to_path_buf(),
            jobs: 1,
        },
    )
    .unwrap_err();
    assert!(err.is_numerical());
    let text = fs::read_to_string(dir.path().join("abort_seed5.json")).unwrap();
    let record: AbortRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(record.seed, 5);
    assert_eq!(record.config_hash, cfg.hash());
    assert!(!dir.path().join(RESULT_FILE).exists());
}

#[test]
fn run_writes_artifacts_that_report_and_diagnose_reproduce() {
    let cfg = small("").with_overrides([("run.seeds", serde_json::json!([5, 6]))]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let result = experiment::run(
        &cfg,
        &RunOptions {
            out_dir: dir.path().to_path_buf(),
            jobs: 2,
        },
    )
    .unwrap();
    assert_eq!(result.seeds.len(), 2);
    assert_eq!(RunResult::load(dir.path()).unwrap(), result);
    assert_eq!(RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap().hash(), cfg.hash());

    let report = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(experiment::report(dir.path()).unwrap(), report);

    for s in &result.seeds {
        let path = dir.path().join(&s.trace_file);
        let trace = TrainingTrace::read(&path).unwrap();
        assert_eq!(trace.meta.config_hash, cfg.hash());
        let d = experiment::diagnose_trace(&path).unwrap();
        assert!(d.consistent);
        assert_eq!(d.hash_matches, Some(true));
        assert_eq!(d.embedded, s.verdict);
    }
    // Harmonic means are recomputable from the stored accuracies.
    let h = gatelab::data::harmonic_mean(result.mean_base, result.mean_novel).ok();
    assert_eq!(h, result.h_mean);
}

#[test]
fn tampered_verdict_is_flagged() {
    let cfg = small("");
    let dir = tempfile::tempdir().unwrap();
    let result = experiment::run(
        &cfg,
        &RunOptions {
            out_dir: dir.path().to_path_buf(),
            jobs: 1,
        },
    )
    .unwrap();
    let path = dir.path().join(&result.seeds[0].trace_file);
    let mut trace = TrainingTrace::read(&path).unwrap();
    let v = trace.verdict.as_mut().unwrap();
    v.drift += 1.0;
    trace.write(&path).unwrap();
    assert!(!experiment::diagnose_trace(&path).unwrap().consistent);
}

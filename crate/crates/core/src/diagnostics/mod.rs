//! Gradient-flow diagnostics, collapse verdicts and representation metrics.

pub mod metrics;
pub mod representation;
pub mod trace;

pub use metrics::{
    cancellation_rate, cancellation_rate_of, detect_collapse, gap_stats, gate_behavior_series, magnitude_gap,
    magnitude_gap_of, mean, median, std_dev, CollapseVerdict, GapStats, GateSeries, GateSignal, Thresholds, Verdict,
};
pub use representation::{representation_metrics, silhouette, RepresentationMetrics};
pub use trace::{GradNorms, RunMeta, StepRecord, TrainingTrace};

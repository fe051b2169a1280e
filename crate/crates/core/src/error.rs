use std::path::PathBuf;

use gatelab_autodiff::AutodiffError;

use crate::diagnostics::StepRecord;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer} out of range for depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no gate gradient signal")]
    NoGateSignal,

    #[error("variant has no gates to diagnose")]
    NoGates,

    #[error("trace too short: {0}")]
    ShortTrace(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure at step {step}: {reason}")]
    Numerical {
        step: usize,
        reason: String,
        /// Most recent step records, oldest first.
        last_steps: Vec<StepRecord>,
    },

    #[error("{}, line {line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LabError::Invalid(msg.into())
    }

    pub fn is_config(&self) -> bool {
        matches!(self, LabError::Config(_) | LabError::UnknownKey(_) | LabError::BadValue { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::Numerical { .. } | LabError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

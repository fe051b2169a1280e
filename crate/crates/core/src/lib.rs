pub mod backbone;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod train;
pub mod variant;

pub use error::{LabError, Result};

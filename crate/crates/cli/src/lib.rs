//! Batch frontend: scenario and config ingestion, engine orchestration and
//! report serialization.

use std::path::Path;

pub mod config;
pub mod io;
pub mod run;

pub use config::{Method, RunConfig, Tolerances, UtilitySpec};
pub use io::{emit_report, load_direction, load_scenarios, Format, Scenarios};
pub use run::{build_model, run, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line} has {got} fields, header has {expected}")]
    RaggedRows { line: usize, expected: usize, got: usize },
    #[error("probabilities sum to {0}, not 1")]
    BadProbability(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] sysrisk::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

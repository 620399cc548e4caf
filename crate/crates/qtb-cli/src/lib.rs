//! Library surface of the `qtb` command-line tool: configuration, CSV
//! ingestion with covariate discretization, pipeline orchestration, and
//! result serialization. The binary in `main.rs` is a thin wrapper so the
//! whole surface stays testable in-process.

pub mod cli;
pub mod config;
pub mod ingest;
pub mod output;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Estimation(#[from] qtb_core::estimate::EstimationError),
    #[error(transparent)]
    Bounds(#[from] qtb_core::bounds::BoundsError),
    #[error(transparent)]
    Inference(#[from] qtb_core::inference::InferenceError),
    #[error(transparent)]
    Sim(#[from] qtb_core::sim::SimError),
    #[error(transparent)]
    Envelope(#[from] qtb_core::envelope::EnvelopeError),
    #[error(transparent)]
    Grid(#[from] qtb_core::dist::GridError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit codes, one per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Envelope(_) | CliError::Grid(_) => 2,
            CliError::Data(_) | CliError::Csv(_) | CliError::Io(_) | CliError::Serde(_) => 3,
            CliError::Estimation(_) | CliError::Bounds(_) => 4,
            CliError::Inference(_) => 5,
            CliError::Sim(_) => 6,
        }
    }
}

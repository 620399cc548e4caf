//! Replication studies on synthetic data-generating processes.
//!
//! Three experiment families: a finite-support sharpness audit of the
//! closed-form envelopes against exact linear programs ([`audit`]), regular
//! smooth inference on a finite-cell DGP whose target law is an exact nested
//! tilt ([`regular`], [`study`]), and a nonregular zero-inflated DGP driving
//! subsampling bands, the Wald comparator, and frontier inference
//! ([`nonregular`], [`study`]).

pub mod audit;
pub mod nonregular;
pub mod regular;
pub mod study;

pub use audit::{gen_audit_cells, run_audit, AuditCase, AuditReport};
pub use nonregular::{ZeroInflatedDgp, ZeroInflatedDgpSpec};
pub use regular::{discretize_truncated_normal, truncated_normal_cdf, RegularDgp, RegularDgpSpec};
pub use study::{
    run_experiment2, run_experiment4, Experiment2Row, Experiment4Row, MetricsReport, StudyConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid DGP configuration: {0}")]
    Config(String),
    #[error("replication failure rate {failed}/{total} exceeds 5%")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Estimation(#[from] crate::estimate::EstimationError),
    #[error(transparent)]
    Bounds(#[from] crate::bounds::BoundsError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Dist(#[from] crate::dist::DistError),
    #[error(transparent)]
    Grid(#[from] crate::dist::GridError),
}

/// Split one root seed into independent per-task streams.
pub(crate) fn task_seed(root: u64, task: u64) -> u64 {
    let mut z = root ^ task.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

//! Sharp partial-identification bounds for transported quantile treatment
//! effects under a joint sensitivity model.
//!
//! The model pairs an internal-validity parameter `gamma` (an odds-ratio
//! bound on treatment selection in the source study) with an
//! external-validity parameter `lambda` (a likelihood-ratio bound on the
//! source-to-target outcome shift). For each pair `s = (gamma, lambda)` the
//! library computes
//!
//! - sharp lower/upper envelopes for the target counterfactual CDF process,
//!   with exact finite-support linear programs as an independent audit
//!   ([`envelope`], [`lp`], [`tilt`]);
//! - quantile and QTE interval hulls plus the breakdown frontier of the
//!   non-refutation region in the `(gamma, lambda)` rectangle ([`bounds`]);
//! - cross-fitted one-step estimation with efficient-influence-function
//!   corrections ([`estimate`]) and resampling-based simultaneous inference
//!   ([`inference`]);
//! - replication studies on synthetic data-generating processes built from
//!   exact least-favorable tilts ([`sim`]).

// Numeric kernels here walk several parallel arrays at once; indexed loops
// are the clearer form for that.
#![allow(clippy::needless_range_loop)]

pub mod bounds;
pub mod dist;
pub mod envelope;
pub mod estimate;
pub mod inference;
pub mod lp;
pub mod sim;
pub mod tilt;

mod simplex;

pub use envelope::{SensitivityPair, Side, UnitProb};

//! Resolved analysis configuration and its provenance hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// The resolved configuration recorded alongside every output bundle.
/// Unknown keys in user-provided JSON are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub command: String,
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub folds: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub grid_size: usize,
    #[serde(default)]
    pub design: String,
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub seed: u64,
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for g in self.gammas.iter().chain(&self.lambdas) {
            if !g.is_finite() || *g < 1.0 {
                return Err(CliError::Config(format!(
                    "sensitivity parameters must be >= 1, got {g}"
                )));
            }
        }
        for tau in &self.taus {
            if !(0.0 < *tau && *tau < 1.0) {
                return Err(CliError::Config(format!("tau must lie in (0,1), got {tau}")));
            }
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err(CliError::Config(format!("eta must lie in [0, 0.5), got {}", self.eta)));
        }
        if !self.alpha.is_finite() || !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }

    /// Stable hash of the serialized configuration, recorded in outputs so
    /// results are traceable to their inputs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Pair up the gamma and lambda lists, recycling a singleton.
    pub fn sensitivity_pairs(&self) -> Result<Vec<qtb_core::SensitivityPair>, CliError> {
        let n = self.gammas.len().max(self.lambdas.len());
        if n == 0 {
            return Err(CliError::Config("need at least one sensitivity pair".into()));
        }
        let pick = |list: &[f64], i: usize| -> Result<f64, CliError> {
            match list.len() {
                0 => Err(CliError::Config("empty sensitivity list".into())),
                1 => Ok(list[0]),
                len if len == n => Ok(list[i]),
                len => Err(CliError::Config(format!(
                    "gamma and lambda lists must have equal length (or one be a single value): {len} vs {n}"
                ))),
            }
        };
        (0..n)
            .map(|i| {
                Ok(qtb_core::SensitivityPair::new(
                    pick(&self.gammas, i)?,
                    pick(&self.lambdas, i)?,
                )?)
            })
            .collect()
    }
}

//! Result serialization: plot-ready CSV tables (12 significant digits) and a
//! JSON result bundle that round-trips bit-identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qtb_core::bounds::{CdfBoundProcess, FrontierGrid, QteHull};
use qtb_core::envelope::Side;
use qtb_core::inference::FrontierConfidence;

use crate::config::AnalysisConfig;
use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// Numbers in CSV outputs carry 12 significant digits.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:.11e}")
}

/// One hull record per (sensitivity point, quantile).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HullRecord {
    pub gamma: f64,
    pub lambda: f64,
    pub hull: QteHull,
}

/// Band-inverted confidence output per (sensitivity point, quantile).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QteIntervalRecord {
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Plug-in hull endpoints (zero-width bands).
    pub delta_lo: f64,
    pub delta_hi: f64,
    /// Outer confidence interval for the hull.
    pub band_lo: f64,
    pub band_hi: f64,
    pub critical: f64,
    pub method: String,
}

/// Everything a run produced, traceable to its configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ResultBundle {
    pub format_version: u32,
    pub config: AnalysisConfig,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<CdfBoundProcess>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub hulls: Vec<HullRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub qte_intervals: Vec<QteIntervalRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontier: Option<FrontierGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontier_confidence: Option<FrontierConfidence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_value: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl ResultBundle {
    pub fn new(config: AnalysisConfig) -> Self {
        let config_hash = config.hash();
        Self { format_version: FORMAT_VERSION, config, config_hash, ..Default::default() }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("result_bundle.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// psi grid CSV: one row per (gamma, lambda, arm, side, threshold).
pub fn write_psi_csv(path: &Path, proc: &CdfBoundProcess) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "gamma,lambda,arm,side,y,psi")?;
    for (s_idx, s) in proc.s_points().iter().enumerate() {
        for arm in 0..2 {
            for side in Side::BOTH {
                let tag = if side == Side::Lower { "lower" } else { "upper" };
                for (j, y) in proc.grid().values().iter().enumerate() {
                    writeln!(
                        f,
                        "{},{},{arm},{tag},{},{}",
                        fmt_num(s.gamma()),
                        fmt_num(s.lambda()),
                        fmt_num(*y),
                        fmt_num(proc.value(s_idx, arm, side, j)),
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Influence-matrix CSV: one row per observation, one column per flat index.
pub fn write_phi_csv(
    path: &Path,
    phi: &qtb_core::estimate::EifEvaluation,
) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..phi.n_indices).map(|j| format!("idx{j}")).collect();
    writeln!(f, "obs,{}", header.join(","))?;
    for i in 0..phi.n {
        let row: Vec<String> = phi.row(i).iter().map(|v| fmt_num(*v)).collect();
        writeln!(f, "{i},{}", row.join(","))?;
    }
    Ok(())
}

/// Frontier grid CSV: node coordinates, kappa, and confidence membership.
pub fn write_frontier_csv(
    path: &Path,
    frontier: &FrontierGrid,
    confidence: Option<&FrontierConfidence>,
) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "gamma,lambda,kappa,non_refuting,inner,outer")?;
    for (idx, (node, kappa)) in frontier.nodes.iter().zip(&frontier.kappa).enumerate() {
        let (inner, outer) = match confidence {
            Some(c) => (c.inner[idx] as u8, c.outer[idx] as u8),
            None => {
                let m = (*kappa >= 0.0) as u8;
                (m, m)
            }
        };
        writeln!(
            f,
            "{},{},{},{},{inner},{outer}",
            fmt_num(node.gamma()),
            fmt_num(node.lambda()),
            fmt_num(*kappa),
            (*kappa >= 0.0) as u8,
        )?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

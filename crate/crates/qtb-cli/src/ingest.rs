//! CSV ingestion: two-sample rows with configurable column names and
//! covariate discretization (categoricals as-is, numerics quantile-binned
//! over the pooled sample).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qtb_core::estimate::{SampleRow, TwoSampleData};

use crate::CliError;

/// Column-name and discretization configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default = "default_r")]
    pub r: String,
    #[serde(default = "default_a")]
    pub a: String,
    #[serde(default = "default_y")]
    pub y: String,
    /// Covariate columns; all remaining columns when omitted.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Number of quantile bins for numeric covariates.
    #[serde(default = "default_bins")]
    pub numeric_bins: usize,
}

fn default_r() -> String {
    "r".into()
}
fn default_a() -> String {
    "a".into()
}
fn default_y() -> String {
    "y".into()
}
fn default_bins() -> usize {
    5
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            r: default_r(),
            a: default_a(),
            y: default_y(),
            covariates: None,
            numeric_bins: default_bins(),
        }
    }
}

/// How each covariate column was encoded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ColumnCoding {
    Categorical { levels: Vec<String> },
    /// Upper bin edges at pooled quantiles; the last bin is unbounded.
    NumericBins { edges: Vec<f64> },
}

/// Cell codebook: covariate columns, their codings, and composed cell labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub columns: Vec<String>,
    pub codings: Vec<ColumnCoding>,
    pub cell_labels: Vec<String>,
}

#[derive(Debug)]
pub struct Ingested {
    pub data: TwoSampleData,
    pub codebook: Codebook,
    pub warnings: Vec<String>,
}

/// Smallest sample value whose empirical CDF reaches `q`.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn ingest_csv(path: &Path, schema: &SchemaConfig) -> Result<Ingested, CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Data(format!("column '{name}' not found in header {headers:?}"))
        })
    };
    let r_col = col(&schema.r)?;
    let a_col = col(&schema.a)?;
    let y_col = col(&schema.y)?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .filter(|h| **h != schema.r && **h != schema.a && **h != schema.y)
            .cloned()
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(CliError::Data("no covariate columns".into()));
    }
    let cov_cols: Vec<usize> =
        cov_names.iter().map(|n| col(n)).collect::<Result<_, _>>()?;

    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    if records.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }

    // Discretize each covariate over the pooled sample.
    let mut codings = Vec::with_capacity(cov_cols.len());
    let mut codes: Vec<Vec<usize>> = Vec::with_capacity(cov_cols.len());
    for (&c, name) in cov_cols.iter().zip(&cov_names) {
        let raw: Vec<&str> = records.iter().map(|rec| rec.get(c).unwrap_or("")).collect();
        if let Some(missing) = raw.iter().position(|v| v.is_empty()) {
            return Err(CliError::Data(format!(
                "row {}: covariate '{name}' is missing",
                missing + 2
            )));
        }
        let numeric: Option<Vec<f64>> =
            raw.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        match numeric {
            Some(values) => {
                let mut sorted = values.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let bins = schema.numeric_bins.max(2);
                let edges: Vec<f64> = (1..bins)
                    .map(|k| empirical_quantile(&sorted, k as f64 / bins as f64))
                    .collect();
                codes.push(
                    values
                        .iter()
                        .map(|v| edges.partition_point(|e| v > e))
                        .collect(),
                );
                codings.push(ColumnCoding::NumericBins { edges });
            }
            None => {
                let mut levels: Vec<String> = raw.iter().map(|v| v.to_string()).collect();
                levels.sort();
                levels.dedup();
                let index: BTreeMap<&str, usize> =
                    levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                codes.push(raw.iter().map(|v| index[*v]).collect());
                codings.push(ColumnCoding::Categorical { levels });
            }
        }
    }
    let radices: Vec<usize> = codings
        .iter()
        .map(|c| match c {
            ColumnCoding::Categorical { levels } => levels.len(),
            ColumnCoding::NumericBins { edges } => edges.len() + 1,
        })
        .collect();

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2; // header is line 1
        let r_raw = rec.get(r_col).unwrap_or("");
        let r = match r_raw {
            "0" => false,
            "1" => true,
            other => {
                return Err(CliError::Data(format!(
                    "row {line}: column '{}' must be 0 or 1, got '{other}'",
                    schema.r
                )))
            }
        };
        let mut cell = 0usize;
        for (k, code) in codes.iter().enumerate() {
            cell = cell * radices[k] + code[i];
        }
        if r {
            let a = rec
                .get(a_col)
                .and_then(|v| v.parse::<u8>().ok())
                .filter(|a| *a <= 1)
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "row {line}: source rows need treatment 0/1 in column '{}'",
                        schema.a
                    ))
                })?;
            let y = rec
                .get(y_col)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|y| y.is_finite())
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "row {line}: source rows need a finite outcome in column '{}'",
                        schema.y
                    ))
                })?;
            rows.push(SampleRow::source(cell, a, y));
        } else {
            // Target rows are covariate-only; observed treatment/outcome
            // columns are masked before estimation.
            if rec.get(y_col).is_some_and(|v| !v.is_empty()) {
                warnings.push(format!(
                    "row {line}: target row has a non-missing outcome; it is ignored"
                ));
            }
            rows.push(SampleRow::target(cell));
        }
    }

    // Compose human-readable cell labels in mixed-radix order.
    let total_cells: usize = radices.iter().product();
    let mut cell_labels = Vec::with_capacity(total_cells);
    for cell in 0..total_cells {
        let mut rem = cell;
        let mut parts = vec![String::new(); codings.len()];
        for k in (0..codings.len()).rev() {
            let code = rem % radices[k];
            rem /= radices[k];
            parts[k] = match &codings[k] {
                ColumnCoding::Categorical { levels } => {
                    format!("{}={}", cov_names[k], levels[code])
                }
                ColumnCoding::NumericBins { .. } => format!("{}=bin{}", cov_names[k], code),
            };
        }
        cell_labels.push(parts.join("|"));
    }

    let data = TwoSampleData::new(rows)
        .map_err(|e| CliError::Data(format!("invalid two-sample structure: {e}")))?;
    Ok(Ingested {
        data,
        codebook: Codebook { columns: cov_names, codings, cell_labels },
        warnings,
    })
}

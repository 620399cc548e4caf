//! Finite-support distributions and threshold grids.
//!
//! Every observed-arm law, tilted law, and estimation grid in this crate is
//! carried by a [`FiniteDist`] on strictly ascending atoms or evaluated on a
//! [`ThresholdGrid`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mass-normalization tolerance for finite distributions.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("support must be non-empty")]
    Empty,
    #[error("atoms must be strictly ascending (violation at index {index})")]
    NotAscending { index: usize },
    #[error("atom/mass length mismatch: {atoms} atoms vs {masses} masses")]
    LengthMismatch { atoms: usize, masses: usize },
    #[error("mass at index {index} is not strictly positive: {value}")]
    NonPositiveMass { index: usize, value: f64 },
    #[error("masses sum to {total}, expected 1 within {MASS_TOL}")]
    NotNormalized { total: f64 },
    #[error("value {value} is not finite")]
    NotFinite { value: f64 },
}

/// A probability distribution with finite support: strictly ascending atoms
/// and strictly positive masses summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDist {
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

impl FiniteDist {
    pub fn new(atoms: Vec<f64>, masses: Vec<f64>) -> Result<Self, DistError> {
        if atoms.is_empty() {
            return Err(DistError::Empty);
        }
        if atoms.len() != masses.len() {
            return Err(DistError::LengthMismatch { atoms: atoms.len(), masses: masses.len() });
        }
        for (i, w) in atoms.windows(2).enumerate() {
            if !w[0].is_finite() {
                return Err(DistError::NotFinite { value: w[0] });
            }
            if w[1] <= w[0] {
                return Err(DistError::NotAscending { index: i + 1 });
            }
        }
        if !atoms[atoms.len() - 1].is_finite() {
            return Err(DistError::NotFinite { value: atoms[atoms.len() - 1] });
        }
        let mut total = 0.0;
        for (i, &m) in masses.iter().enumerate() {
            if !m.is_finite() || m <= 0.0 {
                return Err(DistError::NonPositiveMass { index: i, value: m });
            }
            total += m;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(DistError::NotNormalized { total });
        }
        Ok(Self { atoms, masses })
    }

    /// Point mass at a single atom.
    pub fn degenerate(atom: f64) -> Self {
        Self { atoms: vec![atom], masses: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: support is non-empty
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// CDF evaluated at every atom (cumulative masses; last entry is the
    /// total mass, 1 up to rounding).
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect()
    }

    /// `P(Y <= y)`.
    pub fn cdf(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        for (a, m) in self.atoms.iter().zip(&self.masses) {
            if *a <= y {
                acc += m;
            } else {
                break;
            }
        }
        acc
    }

    /// Left quantile `inf{y : F(y) >= tau}`; the top atom for `tau > 1 - eps`.
    pub fn quantile(&self, tau: f64) -> f64 {
        let mut acc = 0.0;
        for (a, m) in self.atoms.iter().zip(&self.masses) {
            acc += m;
            if acc >= tau - MASS_TOL {
                return *a;
            }
        }
        self.atoms[self.atoms.len() - 1]
    }

    /// Replace masses (same support), renormalizing away float drift.
    /// Callers guarantee the new masses are positive and near-normalized.
    pub(crate) fn with_masses(&self, masses: Vec<f64>) -> Result<Self, DistError> {
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DistError::NotNormalized { total });
        }
        let masses = masses.into_iter().map(|m| m / total).collect();
        FiniteDist::new(self.atoms.clone(), masses)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid must contain at least two points")]
    TooSmall,
    #[error("grid values must be strictly ascending and finite (violation at index {index})")]
    NotAscending { index: usize },
}

/// A strictly ascending evaluation grid spanning the outcome range.
///
/// The top grid point is at or above the maximum outcome so that CDFs reach
/// one on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    values: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() < 2 {
            return Err(GridError::TooSmall);
        }
        for (i, w) in values.windows(2).enumerate() {
            if !w[0].is_finite() || !w[1].is_finite() || w[1] <= w[0] {
                return Err(GridError::NotAscending { index: i + 1 });
            }
        }
        Ok(Self { values })
    }

    /// Equally spaced grid of `n` points over `[lo, hi]` inclusive.
    pub fn equally_spaced(lo: f64, hi: f64, n: usize) -> Result<Self, GridError> {
        if n < 2 || !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(GridError::TooSmall);
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut values: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        values[n - 1] = hi; // avoid cumulative rounding at the top point
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least two points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn spacing(&self) -> f64 {
        (self.max() - self.min()) / (self.len() - 1) as f64
    }

    /// Index of the last grid point at or below `y`, if any.
    pub fn index_at_or_below(&self, y: f64) -> Option<usize> {
        match self.values.partition_point(|v| *v <= y) {
            0 => None,
            k => Some(k - 1),
        }
    }
}

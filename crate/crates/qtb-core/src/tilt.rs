//! Least-favorable threshold tilts.
//!
//! A bounded normalized tilt attaining a whole CDF envelope takes the lower
//! bound on one side of a threshold, the upper bound on the other, and one
//! interpolated value on the threshold atom. These constructions make the
//! envelope bounds attainable path-wise (not merely per threshold), and they
//! double as exact data-generating processes: a target law built by
//! [`nested_exact_tilt`] is admissible at the chosen sensitivity pair by
//! construction.

use crate::dist::FiniteDist;
use crate::envelope::{ell_u, SensitivityPair, Side, UnitProb};

/// A threshold tilt relative to a base distribution.
///
/// `below_value` applies strictly below the threshold atom, `above_value`
/// strictly above, and `atom_value` on the threshold atom itself. For the
/// degenerate identity tilt all values are one and there is no threshold
/// atom.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTilt {
    pub threshold_prob: f64,
    pub threshold_atom_index: Option<usize>,
    pub below_value: f64,
    pub above_value: f64,
    pub atom_value: Option<f64>,
}

impl ThresholdTilt {
    fn identity() -> Self {
        Self {
            threshold_prob: 0.0,
            threshold_atom_index: None,
            below_value: 1.0,
            above_value: 1.0,
            atom_value: None,
        }
    }

    /// Tilt value at atom `j`.
    pub fn value_at(&self, j: usize) -> f64 {
        match self.threshold_atom_index {
            None => 1.0,
            Some(t) => {
                if j < t {
                    self.below_value
                } else if j > t {
                    self.above_value
                } else {
                    self.atom_value.unwrap_or(1.0)
                }
            }
        }
    }
}

/// Smallest index whose cumulative mass reaches `r` (generalized inverse).
fn threshold_index(cumulative: &[f64], r: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| c >= r)
        .unwrap_or(cumulative.len() - 1)
}

fn apply_threshold_tilt(
    base: &FiniteDist,
    below: f64,
    above: f64,
    r: f64,
) -> (ThresholdTilt, FiniteDist) {
    let cumulative = base.cumulative();
    let idx = threshold_index(&cumulative, r);
    let cdf_before = if idx == 0 { 0.0 } else { cumulative[idx - 1] };
    let cdf_at = cumulative[idx];
    let jump = base.masses()[idx];
    // The unique value making the tilt integrate to one. Every atom of a
    // finite support carries mass, so the zero-jump convention (value one)
    // never fires here.
    let atom = (1.0 - below * cdf_before - above * (1.0 - cdf_at)) / jump;
    let tilt = ThresholdTilt {
        threshold_prob: r,
        threshold_atom_index: Some(idx),
        below_value: below,
        above_value: above,
        atom_value: Some(atom),
    };
    let masses: Vec<f64> =
        base.masses().iter().enumerate().map(|(j, m)| m * tilt.value_at(j)).collect();
    let tilted = base
        .with_masses(masses)
        .expect("threshold tilt integrates to one against the base distribution");
    (tilt, tilted)
}

/// Tilt attaining the lower envelope `max{ell F, 1 - u(1 - F)}` at every atom:
/// `ell` below the threshold probability `r = (u-1)/(u-ell)`, `u` above.
pub fn lower_tilt(base: &FiniteDist, ell: f64, u: f64) -> (ThresholdTilt, FiniteDist) {
    debug_assert!(ell > 0.0 && ell <= 1.0 && u >= 1.0);
    if u - ell <= 0.0 {
        return (ThresholdTilt::identity(), base.clone());
    }
    apply_threshold_tilt(base, ell, u, (u - 1.0) / (u - ell))
}

/// Mirror image attaining the upper envelope `min{u F, 1 - ell(1 - F)}`:
/// `u` below the threshold probability `r = (1-ell)/(u-ell)`, `ell` above.
pub fn upper_tilt(base: &FiniteDist, ell: f64, u: f64) -> (ThresholdTilt, FiniteDist) {
    debug_assert!(ell > 0.0 && ell <= 1.0 && u >= 1.0);
    if u - ell <= 0.0 {
        return (ThresholdTilt::identity(), base.clone());
    }
    apply_threshold_tilt(base, u, ell, (1.0 - ell) / (u - ell))
}

/// Source tilt at `(l_gamma(e), u_gamma(e))` followed by a transport tilt at
/// `(1/lambda, lambda)`, matching the requested side. The resulting CDF
/// equals the nested envelope of the base CDF at every atom.
pub fn nested_exact_tilt(
    base: &FiniteDist,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> FiniteDist {
    let (ell, u) = ell_u(e.value(), s.gamma());
    let apply = match side {
        Side::Lower => lower_tilt,
        Side::Upper => upper_tilt,
    };
    let (_, source) = apply(base, ell, u);
    let (_, target) = apply(&source, 1.0 / s.lambda(), s.lambda());
    target
}

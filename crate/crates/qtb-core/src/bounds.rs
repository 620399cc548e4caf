//! Population-level CDF-bound processes, quantile/QTE interval hulls, and the
//! non-refutation surface over the sensitivity rectangle.
//!
//! The marginal bound process `psi^sigma_{a,s}(y)` averages the conditional
//! nested envelope over the target covariate law. Generalized inverses turn
//! the process into quantile bounds (inverting the opposite side), the QTE
//! interval hull combines opposite arm endpoints, and the signed
//! non-refutation value `kappa = min{delta_hi, -delta_lo}` is nonnegative
//! exactly when zero lies in the hull.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::ThresholdGrid;
use crate::envelope::{g_nested, g_nested_raw, SensitivityPair, Side, UnitProb};
use crate::estimate::NuisanceSet;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("cell {cell} has positive target weight but no usable nuisance values")]
    MissingCell { cell: usize },
    #[error("cell weights must be nonnegative and sum to one (sum {total})")]
    BadWeights { total: f64 },
    #[error("target cell {cell} has zero source mass; target law not dominated by source law")]
    AbsolutelyContinuous { cell: usize },
    #[error("cell vectors must share a length")]
    CellLengthMismatch,
    #[error("tau {tau} exceeds the terminal CDF value {terminal}")]
    Tail { tau: f64, terminal: f64 },
    #[error("process layout mismatch: expected {expected} values, got {got}")]
    Layout { expected: usize, got: usize },
    #[error("frontier mesh must be at least 2 in each direction")]
    Mesh,
    #[error("process does not cover the requested sensitivity mesh")]
    MeshMismatch,
}

/// Finite covariate cells with target/source weights and the density ratio
/// `omega = target weight / source weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateCells {
    target_weights: Vec<f64>,
    source_weights: Vec<f64>,
    omega: Vec<f64>,
}

impl CovariateCells {
    /// Build cells from weights; enforces normalization and absolute
    /// continuity of the target law with respect to the source law.
    pub fn new(target_weights: Vec<f64>, source_weights: Vec<f64>) -> Result<Self, BoundsError> {
        if target_weights.len() != source_weights.len() || target_weights.is_empty() {
            return Err(BoundsError::CellLengthMismatch);
        }
        for weights in [&target_weights, &source_weights] {
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(BoundsError::BadWeights { total });
            }
        }
        let mut omega = vec![0.0; target_weights.len()];
        for (x, w0) in target_weights.iter().enumerate() {
            if *w0 > 0.0 {
                if source_weights[x] <= 0.0 {
                    return Err(BoundsError::AbsolutelyContinuous { cell: x });
                }
                omega[x] = w0 / source_weights[x];
            }
        }
        Ok(Self { target_weights, source_weights, omega })
    }

    pub fn len(&self) -> usize {
        self.target_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_weights.is_empty()
    }

    pub fn target_weights(&self) -> &[f64] {
        &self.target_weights
    }

    pub fn source_weights(&self) -> &[f64] {
        &self.source_weights
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }
}

/// Conditional target CDF bound `b^sigma_{a,s}(y, x)`: the nested envelope
/// evaluated at the cell's observed CDF value and propensity.
pub fn conditional_bound(
    p_ax: UnitProb,
    e_ax: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> UnitProb {
    g_nested(p_ax, e_ax, s, side)
}

/// The CDF-bound process: one value per (sensitivity point, arm, side, grid
/// threshold), stored flat.
///
/// Population processes satisfy monotonicity in `y`, ordering across sides,
/// and terminal value one; one-step estimates are stored raw and only
/// monotonized at the band stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfBoundProcess {
    grid: ThresholdGrid,
    s_points: Vec<SensitivityPair>,
    values: Vec<f64>,
}

impl CdfBoundProcess {
    pub fn from_values(
        grid: ThresholdGrid,
        s_points: Vec<SensitivityPair>,
        values: Vec<f64>,
    ) -> Result<Self, BoundsError> {
        let expected = s_points.len() * 4 * grid.len();
        if values.len() != expected {
            return Err(BoundsError::Layout { expected, got: values.len() });
        }
        Ok(Self { grid, s_points, values })
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn s_points(&self) -> &[SensitivityPair] {
        &self.s_points
    }

    /// Number of scalar indices `(s, arm, side, y)`.
    pub fn n_indices(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn offset(&self, s_idx: usize, arm: usize, side: Side) -> usize {
        debug_assert!(arm < 2 && s_idx < self.s_points.len());
        ((s_idx * 2 + arm) * 2 + side.index()) * self.grid.len()
    }

    pub fn curve(&self, s_idx: usize, arm: usize, side: Side) -> &[f64] {
        let o = self.offset(s_idx, arm, side);
        &self.values[o..o + self.grid.len()]
    }

    pub fn value(&self, s_idx: usize, arm: usize, side: Side, y_idx: usize) -> f64 {
        self.values[self.offset(s_idx, arm, side) + y_idx]
    }

    /// Flat position of one index, matching the layout of [`Self::values`].
    pub fn flat_index(&self, s_idx: usize, arm: usize, side: Side, y_idx: usize) -> usize {
        self.offset(s_idx, arm, side) + y_idx
    }

    /// Copy of the process restricted to one sensitivity point.
    pub fn restrict(&self, s_idx: usize) -> CdfBoundProcess {
        let g = self.grid.len();
        let base = s_idx * 4 * g;
        CdfBoundProcess {
            grid: self.grid.clone(),
            s_points: vec![self.s_points[s_idx]],
            values: self.values[base..base + 4 * g].to_vec(),
        }
    }

    /// Check the population invariants: values in `[0,1]`, nondecreasing in
    /// `y`, lower at most upper, terminal value one.
    pub fn validate_population(&self, tol: f64) -> Result<(), BoundsError> {
        let g = self.grid.len();
        for s_idx in 0..self.s_points.len() {
            for arm in 0..2 {
                for side in Side::BOTH {
                    let curve = self.curve(s_idx, arm, side);
                    for (i, w) in curve.windows(2).enumerate() {
                        if w[1] < w[0] - tol {
                            return Err(BoundsError::Layout {
                                expected: i,
                                got: i + 1,
                            });
                        }
                    }
                    if (curve[g - 1] - 1.0).abs() > tol || curve.iter().any(|v| !(-tol..=1.0 + tol).contains(v)) {
                        return Err(BoundsError::Tail { tau: 1.0, terminal: curve[g - 1] });
                    }
                }
                let lower = self.curve(s_idx, arm, Side::Lower);
                let upper = self.curve(s_idx, arm, Side::Upper);
                for (lo, hi) in lower.iter().zip(upper) {
                    if *lo > *hi + tol {
                        return Err(BoundsError::Tail { tau: *lo, terminal: *hi });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sharp marginal CDF-bound process: the target-weighted mixture of
/// conditional nested envelopes over covariate cells, for both arms and both
/// sides at every requested sensitivity point.
pub fn marginal_cdf_bounds(
    nuis: &NuisanceSet,
    s_points: &[SensitivityPair],
) -> Result<CdfBoundProcess, BoundsError> {
    let grid = nuis.grid().clone();
    let g = grid.len();
    let cells = nuis.cells();
    let n_cells = cells.len();

    // Reject incomplete targeted cells before touching the envelope maps.
    for x in 0..n_cells {
        if cells.target_weights()[x] > 0.0 && !nuis.cell_complete(x) {
            return Err(BoundsError::MissingCell { cell: x });
        }
    }

    let mut values = vec![0.0; s_points.len() * 4 * g];
    for (s_idx, s) in s_points.iter().enumerate() {
        for arm in 0..2 {
            for side in Side::BOTH {
                let base = ((s_idx * 2 + arm) * 2 + side.index()) * g;
                for x in 0..n_cells {
                    let w0 = cells.target_weights()[x];
                    if w0 == 0.0 {
                        continue;
                    }
                    let e_arm = nuis.e_arm(arm, x);
                    let p = nuis.p_curve(arm, x);
                    for y_idx in 0..g {
                        values[base + y_idx] +=
                            w0 * g_nested_raw(p[y_idx], e_arm, s.gamma(), s.lambda(), side);
                    }
                }
            }
        }
    }
    CdfBoundProcess::from_values(grid, s_points.to_vec(), values)
}

/// Generalized-inverse quantile bounds on the grid: the lower endpoint
/// inverts the upper CDF envelope and vice versa. Right-continuous step
/// convention; returns grid points without interpolation.
pub fn quantile_bounds(
    proc: &CdfBoundProcess,
    tau: f64,
    arm: usize,
    s_idx: usize,
) -> Result<(f64, f64), BoundsError> {
    let q_lo = invert_curve(proc.grid(), proc.curve(s_idx, arm, Side::Upper), tau)?;
    let q_hi = invert_curve(proc.grid(), proc.curve(s_idx, arm, Side::Lower), tau)?;
    Ok((q_lo, q_hi))
}

/// `inf{y in grid : curve(y) >= tau}` for a nondecreasing curve.
pub(crate) fn invert_curve(
    grid: &ThresholdGrid,
    curve: &[f64],
    tau: f64,
) -> Result<f64, BoundsError> {
    let pos = curve.partition_point(|v| *v < tau);
    if pos == curve.len() {
        return Err(BoundsError::Tail { tau, terminal: curve[curve.len() - 1] });
    }
    Ok(grid.values()[pos])
}

/// QTE interval hull endpoints and the signed non-refutation value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QteHull {
    pub tau: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub kappa: f64,
}

impl QteHull {
    pub fn width(&self) -> f64 {
        self.delta_hi - self.delta_lo
    }

    /// Zero is not refuted when it lies in the hull.
    pub fn non_refuted(&self) -> bool {
        self.kappa >= 0.0
    }
}

/// Sharp QTE interval hull `[q^-_1 - q^+_0, q^+_1 - q^-_0]` at quantile
/// `tau`, with `kappa = min{delta_hi, -delta_lo}`.
pub fn qte_hull(proc: &CdfBoundProcess, tau: f64, s_idx: usize) -> Result<QteHull, BoundsError> {
    let (q1_lo, q1_hi) = quantile_bounds(proc, tau, 1, s_idx)?;
    let (q0_lo, q0_hi) = quantile_bounds(proc, tau, 0, s_idx)?;
    let delta_lo = q1_lo - q0_hi;
    let delta_hi = q1_hi - q0_lo;
    Ok(QteHull { tau, delta_lo, delta_hi, kappa: delta_hi.min(-delta_lo) })
}

/// The closed rectangle `[1, gamma_max] x [1, lambda_max]` of sensitivity
/// pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRect {
    pub gamma_max: f64,
    pub lambda_max: f64,
}

impl SensitivityRect {
    pub fn new(gamma_max: f64, lambda_max: f64) -> Result<Self, BoundsError> {
        if !(gamma_max >= 1.0 && lambda_max >= 1.0) {
            return Err(BoundsError::Mesh);
        }
        Ok(Self { gamma_max, lambda_max })
    }

    /// Row-major mesh enumeration: gamma varies in the outer loop.
    pub fn mesh_points(&self, mesh: (usize, usize)) -> Result<Vec<SensitivityPair>, BoundsError> {
        let (ng, nl) = mesh;
        if ng < 2 || nl < 2 {
            return Err(BoundsError::Mesh);
        }
        let mut points = Vec::with_capacity(ng * nl);
        for i in 0..ng {
            let gamma = 1.0 + (self.gamma_max - 1.0) * i as f64 / (ng - 1) as f64;
            for j in 0..nl {
                let lambda = 1.0 + (self.lambda_max - 1.0) * j as f64 / (nl - 1) as f64;
                points.push(SensitivityPair::new(gamma, lambda).expect("mesh point is valid"));
            }
        }
        Ok(points)
    }
}

/// Non-refutation values on a sensitivity mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierGrid {
    pub tau: f64,
    pub rect: SensitivityRect,
    pub mesh: (usize, usize),
    /// Sensitivity pairs in row-major order (gamma outer).
    pub nodes: Vec<SensitivityPair>,
    pub kappa: Vec<f64>,
}

impl FrontierGrid {
    pub fn node(&self, i_gamma: usize, i_lambda: usize) -> (SensitivityPair, f64) {
        let idx = i_gamma * self.mesh.1 + i_lambda;
        (self.nodes[idx], self.kappa[idx])
    }

    /// Plug-in non-refutation membership per node.
    pub fn non_refuting(&self) -> Vec<bool> {
        self.kappa.iter().map(|k| *k >= 0.0).collect()
    }
}

/// Evaluate the non-refutation value at every node of a sensitivity mesh.
///
/// The process must have been built over exactly the mesh enumeration of
/// `rect` (see [`SensitivityRect::mesh_points`]); deltas and kappas all come
/// from this single process instance so the threshold grid cannot drift
/// between nodes.
pub fn frontier_scan(
    proc: &CdfBoundProcess,
    tau: f64,
    rect: &SensitivityRect,
    mesh: (usize, usize),
) -> Result<FrontierGrid, BoundsError> {
    let nodes = rect.mesh_points(mesh)?;
    if proc.s_points().len() != nodes.len()
        || proc
            .s_points()
            .iter()
            .zip(&nodes)
            .any(|(a, b)| (a.gamma() - b.gamma()).abs() > 1e-12 || (a.lambda() - b.lambda()).abs() > 1e-12)
    {
        return Err(BoundsError::MeshMismatch);
    }
    let mut kappa = Vec::with_capacity(nodes.len());
    for s_idx in 0..nodes.len() {
        kappa.push(qte_hull(proc, tau, s_idx)?.kappa);
    }
    Ok(FrontierGrid { tau, rect: *rect, mesh, nodes, kappa })
}

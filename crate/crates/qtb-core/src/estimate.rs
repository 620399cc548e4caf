//! Finite-support nuisance estimation, influence-function evaluation, and the
//! cross-fitted one-step estimator with its ablations.
//!
//! Covariates live on finite cells, so every nuisance is an empirical cell
//! proportion or an empirical source-arm CDF on the threshold grid. The
//! one-step estimator adds the source augmentation term
//! `omega(X) * zeta(O)` to the target plug-in average; cross-fitting trains
//! the nuisances on fold complements so each observation's score never uses
//! its own data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BoundsError, CdfBoundProcess, CovariateCells};
use crate::dist::ThresholdGrid;
use crate::envelope::{
    envelope_derivatives, EnvelopeProfile, SensitivityPair, Side, TieError, UnitProb,
};

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("row {row}: source rows must carry treatment in {{0,1}} and a finite outcome")]
    IncompleteSourceRow { row: usize },
    #[error("need at least one source row and one target row")]
    EmptySample,
    #[error("k_folds must be at least 2, got {0}")]
    BadFolds(usize),
    #[error("eta must lie in [0, 0.5), got {0}")]
    BadEta(f64),
    #[error("known-design table must provide one propensity per cell")]
    BadDesignTable,
    #[error("cell {cell} has target rows but no source rows")]
    Support { cell: usize },
    #[error("cell {cell}, arm {arm} is empty in the full source sample but the cell is target-supported")]
    EmptyArm { cell: usize, arm: usize },
    #[error("nuisance values invalid for cell {cell}: {reason}")]
    BadNuisance { cell: usize, reason: String },
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

/// One observation: target rows carry only the covariate cell, source rows a
/// treatment arm and an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub source: bool,
    pub cell: usize,
    pub a: Option<u8>,
    pub y: Option<f64>,
}

impl SampleRow {
    pub fn target(cell: usize) -> Self {
        Self { source: false, cell, a: None, y: None }
    }

    pub fn source(cell: usize, a: u8, y: f64) -> Self {
        Self { source: true, cell, a: Some(a), y: Some(y) }
    }
}

/// Two-sample data: a source study with `(X, A, Y)` and a target covariate
/// sample with `X` only. Treatment and outcome on target rows are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleData {
    rows: Vec<SampleRow>,
    n_cells: usize,
    n0: usize,
    n1: usize,
}

impl TwoSampleData {
    pub fn new(rows: Vec<SampleRow>) -> Result<Self, EstimationError> {
        let mut n0 = 0;
        let mut n1 = 0;
        let mut n_cells = 0;
        for (i, row) in rows.iter().enumerate() {
            n_cells = n_cells.max(row.cell + 1);
            if row.source {
                n1 += 1;
                match (row.a, row.y) {
                    (Some(a), Some(y)) if a <= 1 && y.is_finite() => {}
                    _ => return Err(EstimationError::IncompleteSourceRow { row: i }),
                }
            } else {
                n0 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            return Err(EstimationError::EmptySample);
        }
        Ok(Self { rows, n_cells, n0, n1 })
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Stratified subsample without replacement: `m0` target rows and `m1`
    /// source rows drawn uniformly.
    pub fn subsample<R: rand::Rng>(&self, m0: usize, m1: usize, rng: &mut R) -> Result<Self, EstimationError> {
        use rand::seq::IteratorRandom;
        let targets = self.rows.iter().filter(|r| !r.source).choose_multiple(rng, m0);
        let sources = self.rows.iter().filter(|r| r.source).choose_multiple(rng, m1);
        let rows: Vec<SampleRow> = targets.into_iter().chain(sources).copied().collect();
        TwoSampleData::new(rows)
    }

    /// Drop target rows from cells whose source data cannot support
    /// estimation (no source rows in some arm). On realistic full samples
    /// this is a no-op; on small resamples it keeps the estimand defined so
    /// the same procedure can be recomputed inside every subsample.
    pub fn retain_supported_targets(&self) -> Result<Self, EstimationError> {
        let mut arm_counts = vec![[0usize; 2]; self.n_cells];
        for row in &self.rows {
            if row.source {
                arm_counts[row.cell][row.a.expect("validated") as usize] += 1;
            }
        }
        let rows: Vec<SampleRow> = self
            .rows
            .iter()
            .filter(|row| row.source || arm_counts[row.cell].iter().all(|c| *c > 0))
            .copied()
            .collect();
        TwoSampleData::new(rows)
    }

    /// Stratified nonparametric bootstrap resample (with replacement, same
    /// stratum sizes).
    pub fn resample<R: rand::Rng>(&self, rng: &mut R) -> Result<Self, EstimationError> {
        let targets: Vec<&SampleRow> = self.rows.iter().filter(|r| !r.source).collect();
        let sources: Vec<&SampleRow> = self.rows.iter().filter(|r| r.source).collect();
        let mut rows = Vec::with_capacity(self.rows.len());
        for _ in 0..self.n0 {
            rows.push(*targets[rng.random_range(0..targets.len())]);
        }
        for _ in 0..self.n1 {
            rows.push(*sources[rng.random_range(0..sources.len())]);
        }
        TwoSampleData::new(rows)
    }
}

/// Whether the source propensity is known by design or estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignMode {
    /// Observational source: propensities estimated, `chi = 1`.
    Observational,
    /// Known design: arm-1 propensity supplied per cell, `chi = 0`.
    Known { e1: Vec<f64> },
}

impl DesignMode {
    pub fn chi(&self) -> bool {
        matches!(self, DesignMode::Observational)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct FoldNuisance {
    pub target_w: Vec<f64>,
    pub omega: Vec<f64>,
    pub e1: Vec<f64>,
    /// `p[arm][cell * grid_len + y_idx]`, NaN on unsupported strata.
    pub p: [Vec<f64>; 2],
}

/// Estimated (or population) nuisances: cell weights, propensities, source
/// CDFs on the grid, density ratio, sampling shares, and optionally the
/// cross-fitting fold structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    grid: ThresholdGrid,
    cells: CovariateCells,
    e1: Vec<f64>,
    p: [Vec<f64>; 2],
    pi0: f64,
    pi1: f64,
    chi: bool,
    eta: f64,
    folds: Option<Folds>,
    /// Strata that fell back to the all-fold estimate inside some training
    /// fold: `(fold, cell, arm)`, `arm = 2` meaning the whole cell.
    pub borrowed_strata: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Folds {
    k: usize,
    fold_of: Vec<usize>,
    sets: Vec<FoldNuisance>,
}

impl NuisanceSet {
    /// Population-level nuisances (no folds): exact cell laws on the grid.
    pub fn from_population(
        grid: ThresholdGrid,
        cells: CovariateCells,
        e1: Vec<f64>,
        p0: Vec<Vec<f64>>,
        p1: Vec<Vec<f64>>,
    ) -> Result<Self, EstimationError> {
        let n_cells = cells.len();
        if e1.len() != n_cells || p0.len() != n_cells || p1.len() != n_cells {
            return Err(EstimationError::BadDesignTable);
        }
        let g = grid.len();
        let mut p = [vec![f64::NAN; n_cells * g], vec![f64::NAN; n_cells * g]];
        for (arm, curves) in [(0usize, &p0), (1usize, &p1)] {
            for (x, curve) in curves.iter().enumerate() {
                if curve.len() != g {
                    return Err(EstimationError::BadNuisance {
                        cell: x,
                        reason: format!("curve length {} != grid length {g}", curve.len()),
                    });
                }
                p[arm][x * g..(x + 1) * g].copy_from_slice(curve);
            }
        }
        Ok(Self {
            grid,
            cells,
            e1,
            p,
            pi0: 0.5,
            pi1: 0.5,
            chi: false,
            eta: 0.0,
            folds: None,
            borrowed_strata: Vec::new(),
        })
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn cells(&self) -> &CovariateCells {
        &self.cells
    }

    pub fn chi(&self) -> bool {
        self.chi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn k_folds(&self) -> usize {
        self.folds.as_ref().map_or(1, |f| f.k)
    }

    /// Arm-specific propensity with the arm-0 recoding `e_0 = 1 - e_1`.
    pub fn e_arm(&self, arm: usize, cell: usize) -> f64 {
        if arm == 1 {
            self.e1[cell]
        } else {
            1.0 - self.e1[cell]
        }
    }

    pub fn p_curve(&self, arm: usize, cell: usize) -> &[f64] {
        let g = self.grid.len();
        &self.p[arm][cell * g..(cell + 1) * g]
    }

    /// True when both arm CDFs and the propensity are usable in this cell.
    pub fn cell_complete(&self, cell: usize) -> bool {
        self.e1[cell].is_finite()
            && self.p_curve(0, cell).iter().all(|v| v.is_finite())
            && self.p_curve(1, cell).iter().all(|v| v.is_finite())
    }

    fn fold_view(&self, fold: usize) -> NuisanceView<'_> {
        match &self.folds {
            None => NuisanceView {
                grid_len: self.grid.len(),
                omega: self.cells.omega(),
                e1: &self.e1,
                p: [&self.p[0], &self.p[1]],
            },
            Some(f) => {
                let set = &f.sets[fold];
                NuisanceView {
                    grid_len: self.grid.len(),
                    omega: &set.omega,
                    e1: &set.e1,
                    p: [&set.p[0], &set.p[1]],
                }
            }
        }
    }

    fn fold_of(&self, row: usize) -> usize {
        self.folds.as_ref().map_or(0, |f| f.fold_of[row])
    }
}

/// Borrow of one fold-complement nuisance set.
#[derive(Clone, Copy)]
struct NuisanceView<'a> {
    grid_len: usize,
    omega: &'a [f64],
    e1: &'a [f64],
    p: [&'a [f64]; 2],
}

impl<'a> NuisanceView<'a> {
    fn e_arm(&self, arm: usize, cell: usize) -> f64 {
        if arm == 1 {
            self.e1[cell]
        } else {
            1.0 - self.e1[cell]
        }
    }

    fn p_curve(&self, arm: usize, cell: usize) -> &'a [f64] {
        &self.p[arm][cell * self.grid_len..(cell + 1) * self.grid_len]
    }
}

/// Per-(fold, cell, arm) sufficient statistics of the source sample plus
/// per-(fold, cell) target counts.
struct GroupStats {
    k: usize,
    g: usize,
    /// Target counts `n0[fold][cell]`.
    n0: Vec<Vec<usize>>,
    /// Source counts `n1[fold][cell]`.
    n1: Vec<Vec<usize>>,
    /// Source arm counts `n1a[fold][arm][cell]`.
    n1a: Vec<[Vec<usize>; 2]>,
    /// Empirical CDF numerators: counts of `Y <= y_j` per
    /// `[fold][arm][cell * g + j]`.
    cdf_counts: Vec<[Vec<f64>; 2]>,
    /// Sorted distinct grid positions where any fold's source CDF jumps,
    /// per `[arm][cell]`; every estimated curve for the stratum is constant
    /// between consecutive entries.
    jumps: [Vec<Vec<usize>>; 2],
}

impl GroupStats {
    fn collect(data: &TwoSampleData, grid: &ThresholdGrid, fold_of: &[usize], k: usize) -> Self {
        let n_cells = data.n_cells();
        let g = grid.len();
        let mut stats = GroupStats {
            k,
            g,
            n0: vec![vec![0; n_cells]; k],
            n1: vec![vec![0; n_cells]; k],
            n1a: vec![[vec![0; n_cells], vec![0; n_cells]]; k],
            cdf_counts: vec![[vec![0.0; n_cells * g], vec![0.0; n_cells * g]]; k],
            jumps: [vec![Vec::new(); n_cells], vec![Vec::new(); n_cells]],
        };
        for (i, row) in data.rows().iter().enumerate() {
            let fold = fold_of[i];
            if row.source {
                let arm = row.a.expect("validated on construction") as usize;
                let y = row.y.expect("validated on construction");
                stats.n1[fold][row.cell] += 1;
                stats.n1a[fold][arm][row.cell] += 1;
                // Mark the first grid index with y <= grid point; prefix sums
                // later turn the marks into CDF counts.
                let start = grid.values().partition_point(|v| *v < y);
                if start < g {
                    stats.cdf_counts[fold][arm][row.cell * g + start] += 1.0;
                    stats.jumps[arm][row.cell].push(start);
                }
            } else {
                stats.n0[fold][row.cell] += 1;
            }
        }
        for fold in 0..k {
            for arm in 0..2 {
                for cell in 0..n_cells {
                    let base = cell * g;
                    for j in 1..g {
                        let prev = stats.cdf_counts[fold][arm][base + j - 1];
                        stats.cdf_counts[fold][arm][base + j] += prev;
                    }
                }
            }
        }
        for arm in 0..2 {
            for cell in 0..n_cells {
                let jumps = &mut stats.jumps[arm][cell];
                jumps.push(0);
                jumps.sort_unstable();
                jumps.dedup();
            }
        }
        stats
    }

    fn complement_counts(&self, fold: usize, cell: usize) -> (usize, usize, [usize; 2]) {
        let mut n0 = 0;
        let mut n1 = 0;
        let mut n1a = [0, 0];
        for f in 0..self.k {
            if f == fold {
                continue;
            }
            n0 += self.n0[f][cell];
            n1 += self.n1[f][cell];
            n1a[0] += self.n1a[f][0][cell];
            n1a[1] += self.n1a[f][1][cell];
        }
        (n0, n1, n1a)
    }

    fn complement_cdf(&self, fold: usize, arm: usize, cell: usize, out: &mut [f64]) -> usize {
        out.fill(0.0);
        let mut count = 0;
        for f in 0..self.k {
            if f == fold {
                continue;
            }
            count += self.n1a[f][arm][cell];
            let base = cell * self.g;
            for j in 0..self.g {
                out[j] += self.cdf_counts[f][arm][base + j];
            }
        }
        if count > 0 {
            for v in out.iter_mut() {
                *v /= count as f64;
            }
        }
        count
    }
}

/// Deterministic fold assignment: rows are striped within each sample
/// stratum, so reruns on identical data reproduce identical folds.
fn stripe_folds(data: &TwoSampleData, k: usize) -> Vec<usize> {
    let mut fold_of = vec![0; data.n()];
    let mut next = [0usize; 2];
    for (i, row) in data.rows().iter().enumerate() {
        let stratum = row.source as usize;
        fold_of[i] = next[stratum] % k;
        next[stratum] += 1;
    }
    fold_of
}

/// Empirical cell proportions, truncated propensities, and source-arm CDFs,
/// cross-fitted over `k_folds` fold complements.
///
/// Strata that are empty inside a training fold borrow the all-fold estimate
/// (recorded in `borrowed_strata`). A cell with target rows but no source
/// rows anywhere violates absolute continuity and is an error.
pub fn estimate_nuisances(
    data: &TwoSampleData,
    grid: &ThresholdGrid,
    k_folds: usize,
    eta: f64,
    design: &DesignMode,
) -> Result<NuisanceSet, EstimationError> {
    if k_folds < 2 {
        return Err(EstimationError::BadFolds(k_folds));
    }
    if !(0.0..0.5).contains(&eta) {
        return Err(EstimationError::BadEta(eta));
    }
    if let DesignMode::Known { e1 } = design {
        if e1.len() != data.n_cells() {
            return Err(EstimationError::BadDesignTable);
        }
    }

    let n_cells = data.n_cells();
    let g = grid.len();
    let fold_of = stripe_folds(data, k_folds);
    let stats = GroupStats::collect(data, grid, &fold_of, k_folds);

    // Full-sample estimates first; training folds borrow from them.
    let full_n0: Vec<usize> = (0..n_cells).map(|x| (0..k_folds).map(|f| stats.n0[f][x]).sum()).collect();
    let full_n1: Vec<usize> = (0..n_cells).map(|x| (0..k_folds).map(|f| stats.n1[f][x]).sum()).collect();
    for x in 0..n_cells {
        if full_n0[x] > 0 && full_n1[x] == 0 {
            return Err(EstimationError::Support { cell: x });
        }
    }
    let target_w: Vec<f64> = full_n0.iter().map(|c| *c as f64 / data.n0() as f64).collect();
    let source_w: Vec<f64> = full_n1.iter().map(|c| *c as f64 / data.n1() as f64).collect();
    let cells = CovariateCells::new(target_w, source_w)?;

    let truncate = |e: f64| e.clamp(eta, 1.0 - eta);
    let full_e1: Vec<f64> = match design {
        DesignMode::Known { e1 } => e1.iter().map(|e| truncate(*e)).collect(),
        DesignMode::Observational => (0..n_cells)
            .map(|x| {
                if full_n1[x] == 0 {
                    f64::NAN
                } else {
                    let arm1: usize = (0..k_folds).map(|f| stats.n1a[f][1][x]).sum();
                    truncate(arm1 as f64 / full_n1[x] as f64)
                }
            })
            .collect(),
    };

    let mut full_p = [vec![f64::NAN; n_cells * g], vec![f64::NAN; n_cells * g]];
    let mut scratch = vec![0.0; g];
    for arm in 0..2 {
        for x in 0..n_cells {
            let mut count = 0usize;
            scratch.fill(0.0);
            for f in 0..k_folds {
                count += stats.n1a[f][arm][x];
                for j in 0..g {
                    scratch[j] += stats.cdf_counts[f][arm][x * g + j];
                }
            }
            if count == 0 {
                if full_n0[x] > 0 {
                    return Err(EstimationError::EmptyArm { cell: x, arm });
                }
                continue; // unsupported, never targeted
            }
            for j in 0..g {
                full_p[arm][x * g + j] = scratch[j] / count as f64;
            }
        }
    }

    // Fold complements, borrowing full-sample estimates on empty strata.
    let mut borrowed = Vec::new();
    let mut sets = Vec::with_capacity(k_folds);
    for fold in 0..k_folds {
        let mut tw = vec![0.0; n_cells];
        let mut omega = vec![0.0; n_cells];
        let mut e1 = vec![f64::NAN; n_cells];
        let mut p = [vec![f64::NAN; n_cells * g], vec![f64::NAN; n_cells * g]];
        let mut comp_n0_total = 0usize;
        let mut comp_n1_total = 0usize;
        for x in 0..n_cells {
            let (c0, c1, _) = stats.complement_counts(fold, x);
            comp_n0_total += c0;
            comp_n1_total += c1;
        }
        for x in 0..n_cells {
            let (c0, c1, c1a) = stats.complement_counts(fold, x);
            tw[x] = c0 as f64 / comp_n0_total.max(1) as f64;
            if c1 > 0 {
                omega[x] = tw[x] / (c1 as f64 / comp_n1_total as f64);
            } else if full_n1[x] > 0 {
                omega[x] = cells.omega()[x];
                if full_n0[x] > 0 {
                    borrowed.push((fold, x, 2));
                }
            }
            e1[x] = match design {
                DesignMode::Known { e1: table } => truncate(table[x]),
                DesignMode::Observational => {
                    if c1 > 0 {
                        truncate(c1a[1] as f64 / c1 as f64)
                    } else {
                        full_e1[x]
                    }
                }
            };
            for arm in 0..2 {
                let count = stats.complement_cdf(fold, arm, x, &mut scratch);
                if count > 0 {
                    p[arm][x * g..(x + 1) * g].copy_from_slice(&scratch);
                } else if full_p[arm][x * g].is_finite() {
                    p[arm][x * g..(x + 1) * g]
                        .copy_from_slice(&full_p[arm][x * g..(x + 1) * g]);
                    borrowed.push((fold, x, arm));
                }
            }
        }
        sets.push(FoldNuisance { target_w: tw, omega, e1, p });
    }

    Ok(NuisanceSet {
        grid: grid.clone(),
        cells,
        e1: full_e1,
        p: full_p,
        pi0: data.n0() as f64 / data.n() as f64,
        pi1: data.n1() as f64 / data.n() as f64,
        chi: design.chi(),
        eta,
        folds: Some(Folds { k: k_folds, fold_of, sets }),
        borrowed_strata: borrowed,
    })
}

/// Source-residual component of the canonical gradient at one observation:
/// `G_p (1(A=a)/e_a)(1(Y<=y) - p_a) + chi G_e (1(A=a) - e_a)`.
///
/// Propagates [`TieError`] from the derivative table; tied indices are
/// routed to the directional/subsampling path by callers.
#[allow(clippy::too_many_arguments)]
pub fn zeta_source_residual(
    a_obs: u8,
    y_obs: f64,
    arm: usize,
    y: f64,
    p_ax: UnitProb,
    e_ax: UnitProb,
    s: SensitivityPair,
    side: Side,
    chi: bool,
) -> Result<f64, TieError> {
    let d = envelope_derivatives(p_ax, e_ax, s, side)?;
    let ind_a = (a_obs as usize == arm) as u8 as f64;
    let ind_y = (y_obs <= y) as u8 as f64;
    let mut zeta = d.d_p * (ind_a / e_ax.value()) * (ind_y - p_ax.value());
    if chi {
        zeta += d.d_e * (ind_a - e_ax.value());
    }
    Ok(zeta)
}


/// Per-observation canonical-gradient evaluations for a fitted index set.
///
/// Rows follow the data order; columns follow the flat index layout of the
/// companion [`CdfBoundProcess`]. Target rows carry only the target
/// component and source rows only the weighted source residual, so the two
/// components of the gradient are recoverable per row.
#[derive(Debug, Clone)]
pub struct EifEvaluation {
    pub n: usize,
    pub n_indices: usize,
    pub chi: bool,
    values: Vec<f64>,
}

impl EifEvaluation {
    /// Assemble from a row-major value matrix (tests, file loading).
    pub fn from_raw(n: usize, n_indices: usize, chi: bool, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * n_indices);
        Self { n, n_indices, chi, values }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_indices..(i + 1) * self.n_indices]
    }

    pub fn column_mean(&self, idx: usize) -> f64 {
        (0..self.n).map(|i| self.values[i * self.n_indices + idx]).sum::<f64>() / self.n as f64
    }

    pub fn column_sd(&self, idx: usize) -> f64 {
        let mean = self.column_mean(idx);
        let ss: f64 = (0..self.n)
            .map(|i| {
                let v = self.values[i * self.n_indices + idx] - mean;
                v * v
            })
            .sum();
        (ss / self.n as f64).sqrt()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A fitted one-step estimate: the raw (unclamped, unmonotonized) process,
/// the per-observation gradient matrix, and per-index active-set regularity.
#[derive(Debug, Clone)]
pub struct OneStepFit {
    pub process: CdfBoundProcess,
    pub phi: EifEvaluation,
    /// False where some target-supported cell had tied affine pieces; those
    /// indices belong on the subsampling route.
    pub regular: Vec<bool>,
}

/// Ablation variants of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Target plug-in only; the source augmentation is dropped.
    PlugIn,
    /// Full one-step but with the propensity-score component removed
    /// (chi forced to zero) although the design is observational.
    NoGe,
    /// Point-transport estimator: full augmentation at `s = (1, 1)`.
    Point,
}

/// Cross-fitted one-step estimator with per-observation gradient rows.
pub fn one_step_estimate(
    data: &TwoSampleData,
    nuis: &NuisanceSet,
    s_points: &[SensitivityPair],
) -> Result<OneStepFit, EstimationError> {
    one_step_impl(data, nuis, s_points, true, nuis.chi(), true)
}

/// One-step estimate without the gradient matrix (for resampling loops).
pub fn one_step_process(
    data: &TwoSampleData,
    nuis: &NuisanceSet,
    s_points: &[SensitivityPair],
) -> Result<CdfBoundProcess, EstimationError> {
    Ok(one_step_impl(data, nuis, s_points, true, nuis.chi(), false)?.process)
}

/// Ablation estimators sharing the one-step machinery.
pub fn ablation_estimates(
    data: &TwoSampleData,
    nuis: &NuisanceSet,
    s_points: &[SensitivityPair],
    variant: AblationVariant,
) -> Result<CdfBoundProcess, EstimationError> {
    match variant {
        AblationVariant::PlugIn => {
            Ok(one_step_impl(data, nuis, s_points, false, false, false)?.process)
        }
        AblationVariant::NoGe => {
            Ok(one_step_impl(data, nuis, s_points, true, false, false)?.process)
        }
        AblationVariant::Point => {
            let point = [SensitivityPair::point_identified()];
            Ok(one_step_impl(data, nuis, &point, true, nuis.chi(), false)?.process)
        }
    }
}

fn one_step_impl(
    data: &TwoSampleData,
    nuis: &NuisanceSet,
    s_points: &[SensitivityPair],
    with_augmentation: bool,
    chi: bool,
    want_phi: bool,
) -> Result<OneStepFit, EstimationError> {
    let grid = nuis.grid().clone();
    let g = grid.len();
    let n_cells = data.n_cells();
    let k = nuis.k_folds();
    let n_indices = s_points.len() * 4 * g;
    if let Some(folds) = &nuis.folds {
        if folds.fold_of.len() != data.n() {
            return Err(EstimationError::BadNuisance {
                cell: 0,
                reason: format!(
                    "fold map covers {} rows but the data has {}",
                    folds.fold_of.len(),
                    data.n()
                ),
            });
        }
    }
    let fold_of: Vec<usize> = (0..data.n()).map(|i| nuis.fold_of(i)).collect();
    let stats = GroupStats::collect(data, &grid, &fold_of, k);
    // Fold-estimated curves are constant between data jump positions;
    // population nuisances can move anywhere and scan densely.
    let dense_jumps: Vec<usize> = (0..g).collect();
    let segmented = nuis.folds.is_some();

    let targeted: Vec<bool> =
        (0..n_cells).map(|x| nuis.cells().target_weights()[x] > 0.0).collect();
    for x in 0..n_cells {
        if targeted[x] && !nuis.cell_complete(x) {
            return Err(EstimationError::Bounds(BoundsError::MissingCell { cell: x }));
        }
    }

    let mut psi = vec![0.0; n_indices];
    let mut regular = vec![true; n_indices];
    let n0 = data.n0() as f64;
    let n1 = data.n1() as f64;

    // Every estimated curve is a step function that only changes where the
    // stratum's source CDF jumps, so contributions are accumulated as a
    // difference array over constant segments and prefix-summed per curve.
    let mut diff = vec![0.0; g + 1];
    for (s_idx, s) in s_points.iter().enumerate() {
        for arm in 0..2 {
            for side in Side::BOTH {
                let flat0 = ((s_idx * 2 + arm) * 2 + side.index()) * g;
                diff.fill(0.0);
                for fold in 0..k {
                    let view = nuis.fold_view(fold);
                    for x in 0..n_cells {
                        let w_plug = stats.n0[fold][x] as f64 / n0;
                        let omega = view.omega[x];
                        let n1x = stats.n1[fold][x] as f64;
                        let use_aug = with_augmentation && omega > 0.0 && n1x > 0.0;
                        if w_plug == 0.0 && !use_aug && !targeted[x] {
                            continue;
                        }
                        let e = view.e_arm(arm, x);
                        let p_curve = view.p_curve(arm, x);
                        if !e.is_finite() || !p_curve[0].is_finite() {
                            continue; // unsupported cell with zero target weight
                        }
                        let n1xa = stats.n1a[fold][arm][x] as f64;
                        let cdf_row = &stats.cdf_counts[fold][arm][x * g..(x + 1) * g];
                        let inv_n1xa = if n1xa > 0.0 { 1.0 / n1xa } else { 0.0 };
                        let aug_p = if use_aug { omega * n1xa / (e * n1) } else { 0.0 };
                        let aug_e = if use_aug && chi {
                            omega * (n1xa - e * n1x) / n1
                        } else {
                            0.0
                        };
                        let profile = EnvelopeProfile::build(e, *s, side);
                        let mut region = 0;
                        let jumps: &[usize] =
                            if segmented { &stats.jumps[arm][x] } else { &dense_jumps };
                        for (seg, &j0) in jumps.iter().enumerate() {
                            let j1 = jumps.get(seg + 1).copied().unwrap_or(g);
                            let p = p_curve[j0];
                            while region < profile.n_breaks() && p > profile.break_at(region)
                            {
                                region += 1;
                            }
                            let (gv, gp, ge) = profile.eval(region, p);
                            let f_hat = cdf_row[j0] * inv_n1xa;
                            let contrib =
                                w_plug * gv + aug_p * gp * (f_hat - p) + aug_e * ge;
                            diff[j0] += contrib;
                            diff[j1] -= contrib;
                            if targeted[x] && profile.near_tie(p) {
                                for flag in &mut regular[flat0 + j0..flat0 + j1] {
                                    *flag = false;
                                }
                            }
                        }
                    }
                }
                let mut acc = 0.0;
                for (j, d) in diff.iter().take(g).enumerate() {
                    acc += d;
                    psi[flat0 + j] = acc;
                }
            }
        }
    }

    let process = CdfBoundProcess::from_values(grid.clone(), s_points.to_vec(), psi.clone())?;

    let phi = if want_phi {
        let mut values = vec![0.0; data.n() * n_indices];
        let inv_pi0 = data.n() as f64 / n0;
        let inv_pi1 = data.n() as f64 / n1;
        // Rows grouped by (fold, cell) so the bound/derivative tables are
        // computed once per group.
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k * n_cells];
        for (i, row) in data.rows().iter().enumerate() {
            groups[fold_of[i] * n_cells + row.cell].push(i);
        }
        let mut b_table = vec![0.0; n_indices];
        let mut gp_table = vec![0.0; n_indices];
        let mut ge_table = vec![0.0; n_indices];
        for fold in 0..k {
            let view = nuis.fold_view(fold);
            for x in 0..n_cells {
                let members = &groups[fold * n_cells + x];
                if members.is_empty() {
                    continue;
                }
                for (s_idx, s) in s_points.iter().enumerate() {
                    for arm in 0..2 {
                        let e = view.e_arm(arm, x);
                        let p_curve = view.p_curve(arm, x);
                        if !e.is_finite() || !p_curve[0].is_finite() {
                            continue;
                        }
                        for side in Side::BOTH {
                            let profile = EnvelopeProfile::build(e, *s, side);
                            let flat0 = ((s_idx * 2 + arm) * 2 + side.index()) * g;
                            let mut region = profile.region_of(p_curve[0]);
                            for j in 0..g {
                                let p = p_curve[j];
                                while region < profile.n_breaks()
                                    && p > profile.break_at(region)
                                {
                                    region += 1;
                                }
                                let (gv, gp, ge) = profile.eval(region, p);
                                b_table[flat0 + j] = gv;
                                gp_table[flat0 + j] = gp;
                                ge_table[flat0 + j] = ge;
                            }
                        }
                    }
                }
                let omega = view.omega[x];
                for &i in members {
                    let row = &data.rows()[i];
                    let out = &mut values[i * n_indices..(i + 1) * n_indices];
                    if !row.source {
                        for flat in 0..n_indices {
                            out[flat] = inv_pi0 * (b_table[flat] - psi[flat]);
                        }
                    } else if with_augmentation && omega > 0.0 {
                        let a_obs = row.a.expect("validated") as usize;
                        let y_obs = row.y.expect("validated");
                        let y_pos = grid.values().partition_point(|v| *v < y_obs);
                        for (s_idx, _) in s_points.iter().enumerate() {
                            for arm in 0..2 {
                                let e = view.e_arm(arm, x);
                                if !e.is_finite() {
                                    continue;
                                }
                                let p_curve = view.p_curve(arm, x);
                                let ind_a = (a_obs == arm) as u8 as f64;
                                for side in Side::BOTH {
                                    let flat0 = ((s_idx * 2 + arm) * 2 + side.index()) * g;
                                    for j in 0..g {
                                        let ind_y = (y_pos <= j) as u8 as f64;
                                        let mut zeta = gp_table[flat0 + j] * (ind_a / e)
                                            * (ind_y - p_curve[j]);
                                        if chi {
                                            zeta += ge_table[flat0 + j] * (ind_a - e);
                                        }
                                        out[flat0 + j] = inv_pi1 * omega * zeta;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        EifEvaluation { n: data.n(), n_indices, chi, values }
    } else {
        EifEvaluation { n: 0, n_indices, chi, values: Vec::new() }
    };

    Ok(OneStepFit { process, phi, regular })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::marginal_cdf_bounds;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn s(g: f64, l: f64) -> SensitivityPair {
        SensitivityPair::new(g, l).unwrap()
    }

    fn grid4() -> ThresholdGrid {
        ThresholdGrid::equally_spaced(0.0, 3.0, 4).unwrap()
    }

    /// Balanced two-cell data with every row duplicated back to back, so
    /// fold striping puts one copy in each fold and both 2-fold complements
    /// reproduce the full-sample empirical law exactly.
    fn duplicated_data() -> TwoSampleData {
        let mut rows = Vec::new();
        for cell in 0..2 {
            for (arm, ys) in [(0u8, [0.0, 2.0]), (1u8, [1.0, 3.0])] {
                for y in ys {
                    rows.push(SampleRow::source(cell, arm, y));
                    rows.push(SampleRow::source(cell, arm, y));
                }
            }
            rows.push(SampleRow::target(cell));
            rows.push(SampleRow::target(cell));
        }
        TwoSampleData::new(rows).unwrap()
    }

    #[test]
    fn data_validation() {
        assert!(TwoSampleData::new(vec![SampleRow::target(0)]).is_err());
        assert!(TwoSampleData::new(vec![
            SampleRow::target(0),
            SampleRow { source: true, cell: 0, a: None, y: Some(1.0) }
        ])
        .is_err());
        assert!(TwoSampleData::new(vec![
            SampleRow::target(0),
            SampleRow::source(0, 2, 1.0)
        ])
        .is_err());
        let data = TwoSampleData::new(vec![
            SampleRow::target(0),
            SampleRow::source(1, 1, 2.5),
        ])
        .unwrap();
        assert_eq!((data.n0(), data.n1(), data.n_cells()), (1, 1, 2));
    }

    #[test]
    fn nuisance_counts_match_hand_tallies() {
        let data = duplicated_data();
        let nuis =
            estimate_nuisances(&data, &grid4(), 2, 0.05, &DesignMode::Observational).unwrap();
        assert_eq!(nuis.cells().target_weights(), &[0.5, 0.5]);
        assert_eq!(nuis.cells().source_weights(), &[0.5, 0.5]);
        assert_eq!(nuis.cells().omega(), &[1.0, 1.0]);
        assert_abs_diff_eq!(nuis.e_arm(1, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nuis.e_arm(0, 0), 0.5, epsilon = 1e-12);
        // Arm 0 in cell 0 has outcomes {0, 2}: CDF on the grid 0..3.
        assert_eq!(nuis.p_curve(0, 0), &[0.5, 0.5, 1.0, 1.0]);
        assert_eq!(nuis.p_curve(1, 0), &[0.0, 0.5, 0.5, 1.0]);
        assert!(nuis.borrowed_strata.is_empty());
    }

    #[test]
    fn known_design_uses_table_not_data() {
        let data = duplicated_data();
        let table = vec![0.37, 0.61];
        let nuis = estimate_nuisances(
            &data,
            &grid4(),
            2,
            0.05,
            &DesignMode::Known { e1: table.clone() },
        )
        .unwrap();
        assert!(!nuis.chi());
        assert_abs_diff_eq!(nuis.e_arm(1, 0), 0.37, epsilon = 1e-12);
        assert_abs_diff_eq!(nuis.e_arm(1, 1), 0.61, epsilon = 1e-12);
    }

    #[test]
    fn support_violation_detected() {
        let rows = vec![
            SampleRow::target(0),
            SampleRow::target(1),
            SampleRow::source(0, 0, 1.0),
            SampleRow::source(0, 1, 2.0),
        ];
        let data = TwoSampleData::new(rows).unwrap();
        let err =
            estimate_nuisances(&data, &grid4(), 2, 0.05, &DesignMode::Observational).unwrap_err();
        assert_eq!(err, EstimationError::Support { cell: 1 });
    }

    #[test]
    fn empty_stratum_borrows_full_sample() {
        // Cell 0 has a single arm-1 source row; with 2 folds one training
        // fold misses it and must borrow.
        let rows = vec![
            SampleRow::target(0),
            SampleRow::target(0),
            SampleRow::source(0, 1, 1.0),
            SampleRow::source(0, 0, 0.0),
            SampleRow::source(0, 0, 2.0),
            SampleRow::source(0, 0, 3.0),
        ];
        let data = TwoSampleData::new(rows).unwrap();
        let nuis =
            estimate_nuisances(&data, &grid4(), 2, 0.05, &DesignMode::Observational).unwrap();
        assert!(nuis
            .borrowed_strata
            .iter()
            .any(|(_, cell, arm)| *cell == 0 && *arm == 1));
    }

    #[test]
    fn one_step_equals_plug_in_when_nuisances_are_self_consistent() {
        // With duplicated data the fold complements equal the full sample,
        // so the augmentation term vanishes identically and the one-step
        // estimate equals the plug-in, which equals the population bounds of
        // the empirical cells.
        let data = duplicated_data();
        let grid = grid4();
        let nuis =
            estimate_nuisances(&data, &grid, 2, 0.0, &DesignMode::Observational).unwrap();
        let pairs = [s(1.6, 1.4), SensitivityPair::point_identified()];
        let fit = one_step_estimate(&data, &nuis, &pairs).unwrap();
        let plug = ablation_estimates(&data, &nuis, &pairs, AblationVariant::PlugIn).unwrap();
        let oracle = marginal_cdf_bounds(&nuis, &pairs).unwrap();
        for (a, b) in fit.process.values().iter().zip(plug.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in fit.process.values().iter().zip(oracle.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(fit.regular.iter().all(|r| *r));
    }

    #[test]
    fn phi_columns_have_exactly_zero_mean() {
        // The one-step identity: the sample mean of each phi column is zero
        // by construction because psi-hat absorbs both terms.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rows = Vec::new();
        for i in 0..80 {
            let cell = i % 3;
            if i % 5 == 0 {
                rows.push(SampleRow::target(cell));
            } else {
                let arm = rng.random_range(0..2u8);
                let y = rng.random_range(0.0..3.0);
                rows.push(SampleRow::source(cell, arm, y));
            }
        }
        let data = TwoSampleData::new(rows).unwrap();
        let grid = grid4();
        let nuis =
            estimate_nuisances(&data, &grid, 4, 0.05, &DesignMode::Observational).unwrap();
        let fit = one_step_estimate(&data, &nuis, &[s(1.5, 1.3)]).unwrap();
        for idx in 0..fit.phi.n_indices {
            assert_abs_diff_eq!(fit.phi.column_mean(idx), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn zeta_reduces_to_classical_residual_at_unit_pair() {
        let p = UnitProb::new(0.4).unwrap();
        let e = UnitProb::new(0.3).unwrap();
        let sp = SensitivityPair::point_identified();
        // G_p = 1, G_e = 0: the transported-CDF residual.
        let z = zeta_source_residual(1, 0.5, 1, 1.0, p, e, sp, Side::Lower, true).unwrap();
        assert_abs_diff_eq!(z, (1.0 / 0.3) * (1.0 - 0.4), epsilon = 1e-12);
        // chi = 0 drops the propensity component entirely.
        let z0 = zeta_source_residual(1, 0.5, 1, 1.0, p, e, s(2.0, 1.5), Side::Lower, false)
            .unwrap();
        let z1 = zeta_source_residual(1, 0.5, 1, 1.0, p, e, s(2.0, 1.5), Side::Lower, true)
            .unwrap();
        let d = envelope_derivatives(p, e, s(2.0, 1.5), Side::Lower).unwrap();
        assert_abs_diff_eq!(z1 - z0, d.d_e * (1.0 - 0.3), epsilon = 1e-12);
    }

    #[test]
    fn zeta_conditional_mean_zero_at_truth() {
        // Cell-stratified mean of zeta at the true nuisances is zero by
        // construction; check the algebra by exact enumeration over the
        // conditional law.
        let sp = s(1.8, 1.4);
        let e1 = 0.35;
        let p_curve = [0.2, 0.55, 0.8, 1.0];
        let grid = grid4();
        for arm in 0..2usize {
            let e_arm = if arm == 1 { e1 } else { 1.0 - e1 };
            for (j, y) in grid.values().iter().enumerate() {
                let p = p_curve[j];
                let mut mean = 0.0;
                // Enumerate (A, Y <= y) outcomes under the truth: A = arm
                // w.p. e_arm; given membership in the arm, Y <= y w.p. p.
                for (a_obs, prob_a) in [(arm as u8, e_arm), (1 - arm as u8, 1.0 - e_arm)] {
                    for (ind_y, prob_y) in [(1.0, p), (0.0, 1.0 - p)] {
                        let y_obs = if ind_y > 0.5 { *y } else { *y + 10.0 };
                        let z = zeta_source_residual(
                            a_obs,
                            y_obs,
                            arm,
                            *y,
                            UnitProb::new(p).unwrap(),
                            UnitProb::new(e_arm).unwrap(),
                            sp,
                            Side::Lower,
                            true,
                        )
                        .unwrap();
                        mean += prob_a * prob_y * z;
                    }
                }
                assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn point_ablation_is_point_identified_process() {
        let data = duplicated_data();
        let grid = grid4();
        let nuis =
            estimate_nuisances(&data, &grid, 2, 0.0, &DesignMode::Observational).unwrap();
        let point =
            ablation_estimates(&data, &nuis, &[s(2.0, 1.5)], AblationVariant::Point).unwrap();
        assert_eq!(point.s_points(), &[SensitivityPair::point_identified()]);
        // Both sides coincide at (1,1).
        for arm in 0..2 {
            for j in 0..grid.len() {
                assert_abs_diff_eq!(
                    point.value(0, arm, Side::Lower, j),
                    point.value(0, arm, Side::Upper, j),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn subsample_preserves_strata() {
        let data = duplicated_data();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = data.subsample(2, 5, &mut rng).unwrap();
        assert_eq!(sub.n0(), 2);
        assert_eq!(sub.n1(), 5);
        let res = data.resample(&mut rng).unwrap();
        assert_eq!(res.n0(), data.n0());
        assert_eq!(res.n1(), data.n1());
    }
}

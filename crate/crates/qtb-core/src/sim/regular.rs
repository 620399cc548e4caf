//! Regular smooth-inference DGP: finite covariate cells, truncated-normal
//! source arms discretized onto the estimation grid, and a target law
//! generated by exact nested tilts at a known sensitivity pair, so the target
//! is admissible at that pair by construction and the QTE sits near a hull
//! boundary.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bounds::{marginal_cdf_bounds, qte_hull, CovariateCells, QteHull};
use crate::dist::{FiniteDist, ThresholdGrid};
use crate::envelope::{SensitivityPair, Side, UnitProb};
use crate::estimate::{NuisanceSet, SampleRow, TwoSampleData};
use crate::tilt::nested_exact_tilt;

use super::SimError;

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// CDF of a normal truncated to `[lo, hi]`.
pub fn truncated_normal_cdf(y: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("valid normal");
    let z_lo = normal.cdf(lo);
    let z_hi = normal.cdf(hi);
    ((normal.cdf(y.clamp(lo, hi)) - z_lo) / (z_hi - z_lo)).clamp(0.0, 1.0)
}

/// Discretize a truncated normal onto the grid: the mass at grid point `j`
/// is the truncated CDF increment over `(y_{j-1}, y_j]`, so the discretized
/// CDF agrees with the continuous one at every grid point. Zero-mass grid
/// points are dropped from the support.
pub fn discretize_truncated_normal(
    grid: &ThresholdGrid,
    mean: f64,
    sd: f64,
) -> Result<FiniteDist, SimError> {
    let (lo, hi) = (grid.min(), grid.max());
    let mut atoms = Vec::with_capacity(grid.len());
    let mut masses = Vec::with_capacity(grid.len());
    let mut prev = 0.0;
    for &y in grid.values() {
        let f = truncated_normal_cdf(y, mean, sd, lo, hi);
        let mass = f - prev;
        prev = f;
        if mass > 0.0 {
            atoms.push(y);
            masses.push(mass);
        }
    }
    let total: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= total);
    Ok(FiniteDist::new(atoms, masses)?)
}

/// Target-weighted mixture of per-cell laws sharing grid atoms.
pub(crate) fn mixture_on_grid(
    grid: &ThresholdGrid,
    weights: &[f64],
    laws: &[FiniteDist],
) -> Result<FiniteDist, SimError> {
    let mut mass_at = vec![0.0; grid.len()];
    for (w, law) in weights.iter().zip(laws) {
        if *w == 0.0 {
            continue;
        }
        for (atom, mass) in law.atoms().iter().zip(law.masses()) {
            let j = grid.values().partition_point(|v| v < atom);
            debug_assert!(grid.values()[j] == *atom, "law atoms must be grid points");
            mass_at[j] += w * mass;
        }
    }
    let mut atoms = Vec::new();
    let mut masses = Vec::new();
    for (j, m) in mass_at.iter().enumerate() {
        if *m > 0.0 {
            atoms.push(grid.values()[j]);
            masses.push(*m);
        }
    }
    let total: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= total);
    Ok(FiniteDist::new(atoms, masses)?)
}

/// Normalized cell weights from log-weights plus a uniform overlap mixture.
pub(crate) fn softmax_weights(log_w: &[f64], mix: f64) -> Vec<f64> {
    let total: f64 = log_w.iter().map(|v| v.exp()).sum();
    log_w
        .iter()
        .map(|v| (1.0 - mix) * v.exp() / total + mix / log_w.len() as f64)
        .collect()
}

pub(crate) fn sample_cell<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (x, w) in weights.iter().enumerate() {
        acc += w;
        if u <= acc {
            return x;
        }
    }
    weights.len() - 1
}

pub(crate) fn sample_dist<R: Rng>(dist: &FiniteDist, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (atom, mass) in dist.atoms().iter().zip(dist.masses()) {
        acc += mass;
        if u <= acc {
            return *atom;
        }
    }
    dist.atoms()[dist.len() - 1]
}

/// Configuration of the regular tilt DGP.
#[derive(Debug, Clone)]
pub struct RegularDgpSpec {
    pub cells: usize,
    /// Sensitivity pair generating the target law (arm 1 at the lower
    /// envelope, arm 0 at the upper).
    pub s0: SensitivityPair,
    pub y_range: (f64, f64),
    pub grid_size: usize,
    pub oracle_grid_size: usize,
    /// Arm means are `±arm_mean_scale * z_x` (arm 1 positive).
    pub arm_mean_scale: f64,
    /// Outcome scales per arm `(sd0, sd1)`.
    pub arm_scales: (f64, f64),
    pub propensity_trunc: (f64, f64),
    /// Slope of the propensity index in the standardized cell coordinate.
    pub propensity_slope: f64,
    /// Uniform mixture added to the covariate weights for overlap.
    pub overlap_mix: f64,
}

impl Default for RegularDgpSpec {
    fn default() -> Self {
        Self {
            cells: 6,
            s0: SensitivityPair::new(1.60, 1.40).expect("valid pair"),
            y_range: (-4.5, 4.5),
            grid_size: 121,
            oracle_grid_size: 2001,
            arm_mean_scale: 0.5696,
            arm_scales: (0.712, 0.8544),
            propensity_trunc: (0.18, 0.82),
            propensity_slope: 0.85,
            overlap_mix: 0.05,
        }
    }
}

/// The instantiated DGP with its population laws on the estimation grid.
#[derive(Debug, Clone)]
pub struct RegularDgp {
    pub spec: RegularDgpSpec,
    pub grid: ThresholdGrid,
    pub source_w: Vec<f64>,
    pub target_w: Vec<f64>,
    pub e1: Vec<f64>,
    /// Observed source-arm laws per `[arm][cell]`.
    pub source_laws: [Vec<FiniteDist>; 2],
    /// True target potential-outcome laws per `[arm][cell]`.
    pub target_laws: [Vec<FiniteDist>; 2],
}

impl RegularDgp {
    pub fn new(spec: RegularDgpSpec) -> Result<Self, SimError> {
        if spec.cells < 2 {
            return Err(SimError::Config("need at least two covariate cells".into()));
        }
        if spec.y_range.0 >= spec.y_range.1 {
            return Err(SimError::Config(format!(
                "invalid outcome truncation range ({}, {})",
                spec.y_range.0, spec.y_range.1
            )));
        }
        if !(0.0 < spec.propensity_trunc.0
            && spec.propensity_trunc.0 < spec.propensity_trunc.1
            && spec.propensity_trunc.1 < 1.0)
        {
            return Err(SimError::Config("propensity truncation must be inside (0,1)".into()));
        }
        if spec.arm_scales.0 <= 0.0 || spec.arm_scales.1 <= 0.0 {
            return Err(SimError::Config("outcome scales must be positive".into()));
        }
        let j = spec.cells;
        let grid = ThresholdGrid::equally_spaced(spec.y_range.0, spec.y_range.1, spec.grid_size)?;
        let z = |x: usize| (x as f64 - (j - 1) as f64 / 2.0) / ((j - 1) as f64 / 2.0);
        let tau = std::f64::consts::TAU;

        let source_log: Vec<f64> = (0..j)
            .map(|x| 0.15 * (tau * (x as f64 + 1.0) / j as f64).sin() - 0.10 * z(x))
            .collect();
        let target_log: Vec<f64> = (0..j)
            .map(|x| 0.70 * z(x) + 0.20 * (tau * x as f64 / j as f64).cos())
            .collect();
        let source_w = softmax_weights(&source_log, spec.overlap_mix);
        let target_w = softmax_weights(&target_log, spec.overlap_mix);
        let e1: Vec<f64> = (0..j)
            .map(|x| {
                expit(-0.10 + spec.propensity_slope * z(x) + 0.25 * (tau * x as f64 / j as f64).sin())
                    .clamp(spec.propensity_trunc.0, spec.propensity_trunc.1)
            })
            .collect();

        let mut source_laws: [Vec<FiniteDist>; 2] = [Vec::new(), Vec::new()];
        let mut target_laws: [Vec<FiniteDist>; 2] = [Vec::new(), Vec::new()];
        for x in 0..j {
            for arm in 0..2usize {
                let mean = if arm == 1 { spec.arm_mean_scale * z(x) } else { -spec.arm_mean_scale * z(x) };
                let sd = if arm == 1 { spec.arm_scales.1 } else { spec.arm_scales.0 };
                let law = discretize_truncated_normal(&grid, mean, sd)?;
                // Arm 1 sits at the lower envelope, arm 0 at the upper, with
                // the arm-recoded propensity.
                let e_arm = if arm == 1 { e1[x] } else { 1.0 - e1[x] };
                let side = if arm == 1 { Side::Lower } else { Side::Upper };
                let target = nested_exact_tilt(
                    &law,
                    UnitProb::new(e_arm).expect("propensity in range"),
                    spec.s0,
                    side,
                );
                source_laws[arm].push(law);
                target_laws[arm].push(target);
            }
        }
        Ok(Self { spec, grid, source_w, target_w, e1, source_laws, target_laws })
    }

    /// Draw a two-sample data set: `n0` target covariate rows and `n1`
    /// source rows with treatment and outcome.
    pub fn sample(&self, n1: usize, n0: usize, rng: &mut ChaCha8Rng) -> TwoSampleData {
        let mut rows = Vec::with_capacity(n0 + n1);
        for _ in 0..n0 {
            rows.push(SampleRow::target(sample_cell(&self.target_w, rng)));
        }
        for _ in 0..n1 {
            let cell = sample_cell(&self.source_w, rng);
            let arm = u8::from(rng.random::<f64>() < self.e1[cell]);
            let y = sample_dist(&self.source_laws[arm as usize][cell], rng);
            rows.push(SampleRow::source(cell, arm, y));
        }
        TwoSampleData::new(rows).expect("generated data is well-formed")
    }

    /// Exact population nuisances on the estimation grid.
    pub fn oracle_nuisances(&self) -> Result<NuisanceSet, SimError> {
        let cells = CovariateCells::new(self.target_w.clone(), self.source_w.clone())?;
        let p_for = |arm: usize| -> Vec<Vec<f64>> {
            self.source_laws[arm]
                .iter()
                .map(|law| self.grid.values().iter().map(|y| law.cdf(*y)).collect())
                .collect()
        };
        Ok(NuisanceSet::from_population(
            self.grid.clone(),
            cells,
            self.e1.clone(),
            p_for(0),
            p_for(1),
        )?)
    }

    /// Population nuisances of the continuous parent on a dense grid, used
    /// for population hull widths.
    pub fn dense_oracle_nuisances(&self) -> Result<NuisanceSet, SimError> {
        let dense = ThresholdGrid::equally_spaced(
            self.spec.y_range.0,
            self.spec.y_range.1,
            self.spec.oracle_grid_size,
        )?;
        let j = self.spec.cells;
        let z = |x: usize| (x as f64 - (j - 1) as f64 / 2.0) / ((j - 1) as f64 / 2.0);
        let cells = CovariateCells::new(self.target_w.clone(), self.source_w.clone())?;
        let p_for = |arm: usize| -> Vec<Vec<f64>> {
            (0..j)
                .map(|x| {
                    let mean = if arm == 1 {
                        self.spec.arm_mean_scale * z(x)
                    } else {
                        -self.spec.arm_mean_scale * z(x)
                    };
                    let sd = if arm == 1 { self.spec.arm_scales.1 } else { self.spec.arm_scales.0 };
                    dense
                        .values()
                        .iter()
                        .map(|y| {
                            truncated_normal_cdf(
                                *y,
                                mean,
                                sd,
                                self.spec.y_range.0,
                                self.spec.y_range.1,
                            )
                        })
                        .collect()
                })
                .collect()
        };
        let p0 = p_for(0);
        let p1 = p_for(1);
        Ok(NuisanceSet::from_population(dense, cells, self.e1.clone(), p0, p1)?)
    }

    /// Marginal true target law for one arm.
    pub fn true_target_mixture(&self, arm: usize) -> Result<FiniteDist, SimError> {
        mixture_on_grid(&self.grid, &self.target_w, &self.target_laws[arm])
    }

    /// True transported QTE at quantile `tau`.
    pub fn true_qte(&self, tau: f64) -> Result<f64, SimError> {
        let q1 = self.true_target_mixture(1)?.quantile(tau);
        let q0 = self.true_target_mixture(0)?.quantile(tau);
        Ok(q1 - q0)
    }

    /// Population interval hull at `(s, tau)` from the dense-grid oracle.
    pub fn population_hull(&self, s: SensitivityPair, tau: f64) -> Result<QteHull, SimError> {
        let nuis = self.dense_oracle_nuisances()?;
        let proc = marginal_cdf_bounds(&nuis, &[s])?;
        Ok(qte_hull(&proc, tau, 0)?)
    }
}

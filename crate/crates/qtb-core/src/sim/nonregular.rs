//! Nonregular DGP: zero-inflated outcomes with a continuous truncated-normal
//! component. The mass point parks target quantiles on an atom, and the
//! generating sensitivity pair sits close to the envelope switch surfaces,
//! which is exactly the regime where Wald quantile inference breaks and the
//! directional/subsampling route is required.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bounds::{
    frontier_scan, marginal_cdf_bounds, CovariateCells, FrontierGrid, SensitivityRect,
};
use crate::dist::{FiniteDist, ThresholdGrid};
use crate::envelope::{SensitivityPair, Side, UnitProb};
use crate::estimate::{NuisanceSet, SampleRow, TwoSampleData};
use crate::tilt::nested_exact_tilt;

use super::regular::{
    discretize_truncated_normal, expit, mixture_on_grid, sample_cell, sample_dist,
    softmax_weights,
};
use super::SimError;

/// Configuration of the zero-inflated DGP.
#[derive(Debug, Clone)]
pub struct ZeroInflatedDgpSpec {
    pub cells: usize,
    pub s0: SensitivityPair,
    pub y_range: (f64, f64),
    pub grid_size: usize,
    /// Base zero-inflation probability per arm `(arm0, arm1)`.
    pub zero_prob: (f64, f64),
    pub zero_prob_slope: f64,
    /// Continuous-component means per arm `(arm0, arm1)`.
    pub cont_means: (f64, f64),
    pub cont_scales: (f64, f64),
    pub mean_slope: f64,
    pub propensity_trunc: (f64, f64),
    pub overlap_mix: f64,
    pub frontier_rect: SensitivityRect,
    pub frontier_mesh: (usize, usize),
    pub tau0: f64,
}

impl Default for ZeroInflatedDgpSpec {
    fn default() -> Self {
        Self {
            cells: 6,
            s0: SensitivityPair::new(1.20, 1.20).expect("valid pair"),
            y_range: (-3.0, 3.0),
            grid_size: 181,
            zero_prob: (0.15, 0.34),
            zero_prob_slope: 0.05,
            cont_means: (0.9, -0.15),
            cont_scales: (0.75, 0.75),
            mean_slope: 0.25,
            propensity_trunc: (0.2, 0.8),
            overlap_mix: 0.05,
            frontier_rect: SensitivityRect { gamma_max: 4.0, lambda_max: 3.0 },
            frontier_mesh: (31, 31),
            tau0: 0.5,
        }
    }
}

/// The instantiated zero-inflated DGP.
#[derive(Debug, Clone)]
pub struct ZeroInflatedDgp {
    pub spec: ZeroInflatedDgpSpec,
    pub grid: ThresholdGrid,
    /// Grid point carrying the outcome mass point (the grid value closest to
    /// zero).
    pub atom: f64,
    pub source_w: Vec<f64>,
    pub target_w: Vec<f64>,
    pub e1: Vec<f64>,
    pub zero_probs: [Vec<f64>; 2],
    pub source_laws: [Vec<FiniteDist>; 2],
    pub target_laws: [Vec<FiniteDist>; 2],
}

impl ZeroInflatedDgp {
    pub fn new(spec: ZeroInflatedDgpSpec) -> Result<Self, SimError> {
        if spec.cells < 2 {
            return Err(SimError::Config("need at least two covariate cells".into()));
        }
        if spec.y_range.0 >= 0.0 || spec.y_range.1 <= 0.0 {
            return Err(SimError::Config("outcome range must contain the zero atom".into()));
        }
        for p in [
            spec.zero_prob.0,
            spec.zero_prob.1,
            spec.zero_prob.0 + spec.zero_prob_slope,
            spec.zero_prob.1 + spec.zero_prob_slope,
        ] {
            if !(0.0 < p && p < 1.0) {
                return Err(SimError::Config(format!("zero-inflation probability {p} outside (0,1)")));
            }
        }
        let j = spec.cells;
        let grid = ThresholdGrid::equally_spaced(spec.y_range.0, spec.y_range.1, spec.grid_size)?;
        // Pin the mass point to the grid value nearest zero.
        let atom_idx = grid
            .values()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite grid"))
            .map(|(i, _)| i)
            .expect("grid non-empty");
        let atom = grid.values()[atom_idx];

        let z = |x: usize| (x as f64 - (j - 1) as f64 / 2.0) / ((j - 1) as f64 / 2.0);
        let tau = std::f64::consts::TAU;
        let source_log: Vec<f64> = (0..j).map(|x| -0.10 * z(x)).collect();
        let target_log: Vec<f64> =
            (0..j).map(|x| 0.40 * z(x) + 0.15 * (tau * x as f64 / j as f64).cos()).collect();
        let source_w = softmax_weights(&source_log, spec.overlap_mix);
        let target_w = softmax_weights(&target_log, spec.overlap_mix);
        let e1: Vec<f64> = (0..j)
            .map(|x| {
                expit(0.15 + 0.50 * z(x)).clamp(spec.propensity_trunc.0, spec.propensity_trunc.1)
            })
            .collect();

        let mut zero_probs: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut source_laws: [Vec<FiniteDist>; 2] = [Vec::new(), Vec::new()];
        let mut target_laws: [Vec<FiniteDist>; 2] = [Vec::new(), Vec::new()];
        for x in 0..j {
            for arm in 0..2usize {
                let base_pi = if arm == 1 { spec.zero_prob.1 } else { spec.zero_prob.0 };
                let pi = (base_pi + spec.zero_prob_slope * z(x)).clamp(0.02, 0.95);
                let mean = (if arm == 1 { spec.cont_means.1 } else { spec.cont_means.0 })
                    + spec.mean_slope * z(x);
                let sd = if arm == 1 { spec.cont_scales.1 } else { spec.cont_scales.0 };
                let continuous = discretize_truncated_normal(&grid, mean, sd)?;
                // Mix the atom into the continuous component on the grid.
                let mut mass_at = vec![0.0; grid.len()];
                for (a, m) in continuous.atoms().iter().zip(continuous.masses()) {
                    let pos = grid.values().partition_point(|v| v < a);
                    mass_at[pos] += (1.0 - pi) * m;
                }
                mass_at[atom_idx] += pi;
                let mut atoms = Vec::new();
                let mut masses = Vec::new();
                for (pos, m) in mass_at.iter().enumerate() {
                    if *m > 0.0 {
                        atoms.push(grid.values()[pos]);
                        masses.push(*m);
                    }
                }
                let total: f64 = masses.iter().sum();
                masses.iter_mut().for_each(|m| *m /= total);
                let law = FiniteDist::new(atoms, masses)?;

                let e_arm = if arm == 1 { e1[x] } else { 1.0 - e1[x] };
                let side = if arm == 1 { Side::Lower } else { Side::Upper };
                let target = nested_exact_tilt(
                    &law,
                    UnitProb::new(e_arm).expect("propensity in range"),
                    spec.s0,
                    side,
                );
                zero_probs[arm].push(pi);
                source_laws[arm].push(law);
                target_laws[arm].push(target);
            }
        }
        Ok(Self { spec, grid, atom, source_w, target_w, e1, zero_probs, source_laws, target_laws })
    }

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

    pub fn true_target_mixture(&self, arm: usize) -> Result<FiniteDist, SimError> {
        mixture_on_grid(&self.grid, &self.target_w, &self.target_laws[arm])
    }

    pub fn true_qte(&self, tau: f64) -> Result<f64, SimError> {
        let q1 = self.true_target_mixture(1)?.quantile(tau);
        let q0 = self.true_target_mixture(0)?.quantile(tau);
        Ok(q1 - q0)
    }

    /// Oracle non-refutation surface at `tau0` over the configured mesh.
    pub fn oracle_frontier(&self) -> Result<FrontierGrid, SimError> {
        let nuis = self.oracle_nuisances()?;
        let nodes = self.spec.frontier_rect.mesh_points(self.spec.frontier_mesh)?;
        let proc = marginal_cdf_bounds(&nuis, &nodes)?;
        Ok(frontier_scan(&proc, self.spec.tau0, &self.spec.frontier_rect, self.spec.frontier_mesh)?)
    }

    /// Rectangle and mesh used for frontier scans.
    pub fn frontier_shape(&self) -> (SensitivityRect, (usize, usize)) {
        (self.spec.frontier_rect, self.spec.frontier_mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dgp() -> ZeroInflatedDgp {
        ZeroInflatedDgp::new(ZeroInflatedDgpSpec {
            grid_size: 121,
            frontier_mesh: (7, 7),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_probabilities_respected() {
        let dgp = small_dgp();
        for arm in 0..2 {
            for (x, pi) in dgp.zero_probs[arm].iter().enumerate() {
                let law = &dgp.source_laws[arm][x];
                let pos = law.atoms().iter().position(|a| *a == dgp.atom).expect("atom present");
                let atom_mass = law.masses()[pos];
                assert!(
                    atom_mass >= *pi - 1e-12,
                    "arm {arm} cell {x}: atom mass {atom_mass} below pi {pi}"
                );
            }
        }
    }

    #[test]
    fn target_median_sits_on_the_atom() {
        // Arm-1 target quantiles at and around the median land exactly on
        // the zero atom by construction.
        let dgp = small_dgp();
        let mixture = dgp.true_target_mixture(1).unwrap();
        let below = mixture.cdf(dgp.atom - 1e-9);
        let at = mixture.cdf(dgp.atom);
        assert!(below < 0.5 && 0.5 <= at, "median straddle failed: {below} vs {at}");
        assert_eq!(mixture.quantile(0.5), dgp.atom);
        assert_eq!(mixture.quantile(below + 0.01), dgp.atom);
    }

    #[test]
    fn effect_is_nonzero_and_frontier_crosses() {
        let dgp = small_dgp();
        let qte = dgp.true_qte(dgp.spec.tau0).unwrap();
        assert!(qte.abs() > 0.05, "true QTE {qte} too close to zero for a frontier");
        let frontier = dgp.oracle_frontier().unwrap();
        let memberships = frontier.non_refuting();
        assert!(memberships.iter().any(|m| *m), "no non-refuting node in the rectangle");
        assert!(memberships.iter().any(|m| !*m), "entire rectangle non-refuting");
        // The generating pair is admissible, so kappa at the corner closest
        // to s0 on the mesh should eventually turn nonnegative along the
        // diagonal.
        let (ng, nl) = frontier.mesh;
        let (_, kappa_corner) = frontier.node(ng - 1, nl - 1);
        assert!(kappa_corner >= 0.0);
    }

    #[test]
    fn atom_inflates_wald_density_estimates() {
        // The mass point sits inside the finite-difference window of any
        // quantile landing on it, so the Wald density estimate explodes
        // there (collapsing the reported standard error); the density floor
        // stays silent on the display quantiles of this DGP. Both facts
        // together are what break Wald endpoint intervals here.
        use crate::bounds::{marginal_cdf_bounds, quantile_bounds};
        use crate::estimate::EifEvaluation;
        use crate::inference::quantile_if_column;
        let dgp = small_dgp();
        let nuis = dgp.oracle_nuisances().unwrap();
        let proc = marginal_cdf_bounds(&nuis, &[dgp.spec.s0]).unwrap();
        let bw = 2.0 * dgp.grid.spacing();
        let (_, q_hi) = quantile_bounds(&proc, 0.5, 1, 0).unwrap();
        assert_eq!(q_hi, dgp.atom, "upper median bound sits on the atom");
        let curve = proc.curve(0, 1, Side::Lower);
        let at = |y: f64| {
            let pos = dgp.grid.values().partition_point(|v| *v <= y);
            curve[pos.saturating_sub(1)]
        };
        let f_hat = (at(q_hi + bw) - at(q_hi - bw)) / (2.0 * bw);
        assert!(f_hat > 1.0, "atom-inflated density {f_hat}");
        let phi = EifEvaluation::from_raw(1, proc.n_indices(), false, vec![0.0; proc.n_indices()]);
        for tau in [0.25, 0.5, 0.75] {
            for arm in 0..2 {
                for endpoint in Side::BOTH {
                    assert!(
                        quantile_if_column(&proc, &phi, tau, arm, 0, endpoint, bw).is_ok(),
                        "floor fired unexpectedly at tau {tau}"
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_shapes() {
        let dgp = small_dgp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = dgp.sample(600, 900, &mut rng);
        assert_eq!(data.n1(), 600);
        assert_eq!(data.n0(), 900);
        // The atom shows up in a nontrivial share of the source outcomes.
        let zeros = data
            .rows()
            .iter()
            .filter(|r| r.source && r.y == Some(dgp.atom))
            .count();
        assert!(zeros as f64 / 600.0 > 0.1);
    }
}

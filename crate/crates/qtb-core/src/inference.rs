//! Resampling critical values, simultaneous CDF bands, band inversion, the
//! Wald comparator, and frontier confidence sets.
//!
//! The primary route is a simultaneous band for the CDF-bound process
//! (multiplier bootstrap on the regular index set, m-out-of-n subsampling
//! otherwise), inverted into quantile and QTE confidence sets through
//! monotone outer envelopes. Wald endpoint intervals with finite-difference
//! density estimates are provided as the comparator that fails under mass
//! points.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{invert_curve, BoundsError, CdfBoundProcess, FrontierGrid};
use crate::dist::ThresholdGrid;
use crate::envelope::{SensitivityPair, Side};
use crate::estimate::{EifEvaluation, EstimationError, TwoSampleData};

/// Density floor below which Wald quantile inference refuses to report.
pub const DENSITY_FLOOR: f64 = 1e-3;
const SUBSAMPLE_RETRY_CAP: usize = 10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("gradient matrix is empty")]
    EmptyPhi,
    #[error("need at least 99 resampling draws, got {0}")]
    TooFewDraws(usize),
    #[error("subsample size m={m} must satisfy 30 <= m < n={n}")]
    BadSubsampleSize { m: usize, n: usize },
    #[error("subsample draw {draw} degenerate after {SUBSAMPLE_RETRY_CAP} retries: {source}")]
    DegenerateSubsample { draw: usize, source: EstimationError },
    #[error("density estimate {f:.3e} below floor {DENSITY_FLOOR:.1e}; quantile endpoint is nonregular, use band inversion")]
    DensityFloor { f: f64 },
    #[error("empty point set")]
    EmptySet,
    #[error("kappa branch gap {gap:.3e} below twice the grid spacing {spacing:.3e}; use the subsampling route")]
    MinGap { gap: f64, spacing: f64 },
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

/// Empirical upper quantile used for critical values: the
/// `ceil((1 - alpha) B)`-th smallest of `B` draws.
fn upper_quantile(mut draws: Vec<f64>, alpha: f64) -> f64 {
    draws.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let b = draws.len();
    let rank = ((1.0 - alpha) * b as f64).ceil() as usize;
    draws[rank.clamp(1, b) - 1]
}

/// Multiplier-bootstrap critical value: the `(1 - alpha)` quantile of
/// `sup_j |n^{-1/2} sum_i xi_i phi_ij|` over independent standard Gaussian
/// multipliers. Deterministic given the seed.
pub fn multiplier_critical(
    phi: &EifEvaluation,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<f64, InferenceError> {
    let full = 0..phi.n_indices;
    Ok(multiplier_criticals_blocks(phi, std::slice::from_ref(&full), alpha, n_draws, seed)?[0])
}

/// Per-block multiplier criticals sharing one multiplier stream: each block
/// is a set of column indices treated as its own sup index set.
pub fn multiplier_criticals_blocks(
    phi: &EifEvaluation,
    blocks: &[std::ops::Range<usize>],
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>, InferenceError> {
    if phi.n == 0 || phi.n_indices == 0 {
        return Err(InferenceError::EmptyPhi);
    }
    if n_draws < 99 {
        return Err(InferenceError::TooFewDraws(n_draws));
    }
    let n = phi.n;
    let scale = 1.0 / (n as f64).sqrt();
    let sups: Vec<Vec<f64>> = (0..n_draws)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(draw as u64 + 1)));
            let mut acc = vec![0.0; phi.n_indices];
            for i in 0..n {
                let xi: f64 = rng.sample(StandardNormal);
                let row = phi.row(i);
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += xi * v;
                }
            }
            blocks
                .iter()
                .map(|block| {
                    acc[block.clone()]
                        .iter()
                        .fold(0.0_f64, |m, z| m.max((z * scale).abs()))
                })
                .collect()
        })
        .collect();
    Ok((0..blocks.len())
        .map(|b| upper_quantile(sups.iter().map(|s| s[b]).collect(), alpha))
        .collect())
}

fn derive_seed(seed: u64, draw: usize, retry: usize) -> u64 {
    let mut z = seed ^ ((draw as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        ^ ((retry as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resample_criticals<F>(
    data: &TwoSampleData,
    pipeline: &F,
    full_stat: &[f64],
    scheme: (Option<(usize, usize)>, f64),
    n_draws: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64, InferenceError>
where
    F: Fn(&TwoSampleData) -> Result<Vec<f64>, EstimationError> + Sync,
{
    if n_draws < 99 {
        return Err(InferenceError::TooFewDraws(n_draws));
    }
    let (subsample_sizes, scale) = scheme;
    let stats: Result<Vec<f64>, InferenceError> = (0..n_draws)
        .into_par_iter()
        .map(|draw| {
            let mut last_err = None;
            for retry in 0..SUBSAMPLE_RETRY_CAP {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, draw, retry));
                let redrawn = match subsample_sizes {
                    Some((m0, m1)) => data.subsample(m0, m1, &mut rng),
                    None => data.resample(&mut rng),
                };
                let result = redrawn.and_then(|sample| pipeline(&sample));
                match result {
                    Ok(values) => {
                        debug_assert_eq!(values.len(), full_stat.len());
                        let sup = values
                            .iter()
                            .zip(full_stat)
                            .fold(0.0_f64, |m, (v, f)| m.max((v - f).abs()));
                        return Ok(scale * sup);
                    }
                    Err(err) => last_err = Some(err),
                }
            }
            Err(InferenceError::DegenerateSubsample {
                draw,
                source: last_err.expect("retry loop ran"),
            })
        })
        .collect();
    Ok(upper_quantile(stats?, alpha))
}

/// m-out-of-n subsampling critical value for a recomputed statistic vector:
/// the `(1 - alpha)` quantile of `sqrt(m) sup_j |stat_m[j] - stat_n[j]|`
/// over stratified without-replacement subsamples. Compared at scale
/// `sqrt(n)` by the band builders, which is the rescaling convention for
/// subsample-based bands.
pub fn subsample_critical<F>(
    data: &TwoSampleData,
    pipeline: &F,
    full_stat: &[f64],
    m: usize,
    n_draws: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64, InferenceError>
where
    F: Fn(&TwoSampleData) -> Result<Vec<f64>, EstimationError> + Sync,
{
    let n = data.n();
    if m < 30 || m >= n {
        return Err(InferenceError::BadSubsampleSize { m, n });
    }
    // Proportional allocation preserves the two-sample structure.
    let m1 = ((m * data.n1()) as f64 / n as f64).round() as usize;
    let m1 = m1.clamp(1, m - 1);
    let m0 = m - m1;
    resample_criticals(
        data,
        pipeline,
        full_stat,
        (Some((m0, m1)), (m as f64).sqrt()),
        n_draws,
        alpha,
        seed,
    )
}

/// Regular n-out-of-n bootstrap critical value (stratified, with
/// replacement), scaled by `sqrt(n)`.
pub fn bootstrap_critical<F>(
    data: &TwoSampleData,
    pipeline: &F,
    full_stat: &[f64],
    n_draws: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64, InferenceError>
where
    F: Fn(&TwoSampleData) -> Result<Vec<f64>, EstimationError> + Sync,
{
    resample_criticals(
        data,
        pipeline,
        full_stat,
        (None, (data.n() as f64).sqrt()),
        n_draws,
        alpha,
        seed,
    )
}

/// Simultaneous CDF bands: raw truncated bands and their monotone outer
/// envelopes, per (sensitivity point, arm, side) curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSet {
    pub critical: f64,
    pub alpha: f64,
    pub n: usize,
    grid: ThresholdGrid,
    s_points: Vec<SensitivityPair>,
    raw_lower: Vec<f64>,
    raw_upper: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BandSet {
    fn offset(&self, s_idx: usize, arm: usize, side: Side) -> usize {
        ((s_idx * 2 + arm) * 2 + side.index()) * self.grid.len()
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn s_points(&self) -> &[SensitivityPair] {
        &self.s_points
    }

    pub fn lower_curve(&self, s_idx: usize, arm: usize, side: Side) -> &[f64] {
        let o = self.offset(s_idx, arm, side);
        &self.lower[o..o + self.grid.len()]
    }

    pub fn upper_curve(&self, s_idx: usize, arm: usize, side: Side) -> &[f64] {
        let o = self.offset(s_idx, arm, side);
        &self.upper[o..o + self.grid.len()]
    }

    pub fn raw_lower_curve(&self, s_idx: usize, arm: usize, side: Side) -> &[f64] {
        let o = self.offset(s_idx, arm, side);
        &self.raw_lower[o..o + self.grid.len()]
    }

    pub fn raw_upper_curve(&self, s_idx: usize, arm: usize, side: Side) -> &[f64] {
        let o = self.offset(s_idx, arm, side);
        &self.raw_upper[o..o + self.grid.len()]
    }

    /// True when a monotone curve lies inside the monotone envelopes
    /// pointwise for the given (s, arm, side).
    pub fn contains_curve(&self, s_idx: usize, arm: usize, side: Side, curve: &[f64]) -> bool {
        self.lower_curve(s_idx, arm, side)
            .iter()
            .zip(self.upper_curve(s_idx, arm, side))
            .zip(curve)
            .all(|((lo, hi), v)| *lo <= v + 1e-12 && *v <= hi + 1e-12)
    }
}

/// Raw truncated bands `max{0, psi - c/sqrt(n)}`, `min{1, psi + c/sqrt(n)}`
/// and their monotone outer envelopes (running max from the left for the
/// lower band, running min from the right for the upper band).
pub fn build_bands(proc: &CdfBoundProcess, critical: f64, n: usize, alpha: f64) -> BandSet {
    let g = proc.grid().len();
    let half_width = critical / (n as f64).sqrt();
    let n_curves = proc.s_points().len() * 4;
    let mut raw_lower = vec![0.0; n_curves * g];
    let mut raw_upper = vec![0.0; n_curves * g];
    for (i, v) in proc.values().iter().enumerate() {
        raw_lower[i] = (v - half_width).max(0.0);
        raw_upper[i] = (v + half_width).min(1.0);
    }
    let mut lower = raw_lower.clone();
    let mut upper = raw_upper.clone();
    for c in 0..n_curves {
        let base = c * g;
        for j in 1..g {
            lower[base + j] = lower[base + j].max(lower[base + j - 1]);
        }
        for j in (0..g - 1).rev() {
            upper[base + j] = upper[base + j].min(upper[base + j + 1]);
        }
    }
    BandSet {
        critical,
        alpha,
        n,
        grid: proc.grid().clone(),
        s_points: proc.s_points().to_vec(),
        raw_lower,
        raw_upper,
        lower,
        upper,
    }
}

/// A confidence interval for one quantile-bound endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileCi {
    pub tau: f64,
    pub arm: usize,
    /// Which sharp endpoint: `Lower` is the lower quantile bound `q^-`
    /// (inverting the upper CDF envelope), `Upper` is `q^+`.
    pub endpoint: Side,
    pub lo: f64,
    pub hi: f64,
    /// Set when the band never reached `tau` on the grid and the top grid
    /// point stands in as a sentinel.
    pub tail_truncated: bool,
}

/// Invert the monotone band envelopes into quantile-bound confidence
/// intervals: the lower endpoint inverts the upper-side bands and vice
/// versa.
pub fn invert_bands(
    bands: &BandSet,
    tau_list: &[f64],
    arm: usize,
    s_idx: usize,
) -> Vec<QuantileCi> {
    let grid = &bands.grid;
    let mut out = Vec::with_capacity(tau_list.len() * 2);
    for &tau in tau_list {
        // q^- in [inf{U+ >= tau}, inf{L+ >= tau}]
        for endpoint in Side::BOTH {
            let band_side = match endpoint {
                Side::Lower => Side::Upper,
                Side::Upper => Side::Lower,
            };
            let upper_env = bands.upper_curve(s_idx, arm, band_side);
            let lower_env = bands.lower_curve(s_idx, arm, band_side);
            let (lo, lo_trunc) = match invert_curve(grid, upper_env, tau) {
                Ok(v) => (v, false),
                Err(_) => (grid.max(), true),
            };
            let (hi, hi_trunc) = match invert_curve(grid, lower_env, tau) {
                Ok(v) => (v, false),
                Err(_) => (grid.max(), true),
            };
            out.push(QuantileCi {
                tau,
                arm,
                endpoint,
                lo,
                hi,
                tail_truncated: lo_trunc || hi_trunc,
            });
        }
    }
    out
}

/// Outer confidence interval for the QTE interval hull from arm-specific
/// quantile CIs: `[q1_lower.lo - q0_upper.hi, q1_upper.hi - q0_lower.lo]`.
pub fn qte_outer_band(
    q1_lower: &QuantileCi,
    q1_upper: &QuantileCi,
    q0_lower: &QuantileCi,
    q0_upper: &QuantileCi,
) -> (f64, f64) {
    debug_assert!(q1_lower.arm == 1 && q1_upper.arm == 1);
    debug_assert!(q0_lower.arm == 0 && q0_upper.arm == 0);
    (q1_lower.lo - q0_upper.hi, q1_upper.hi - q0_lower.lo)
}

/// Linear interpolation of a grid curve at `y` (clamped to the grid range).
fn interp(grid: &ThresholdGrid, curve: &[f64], y: f64) -> f64 {
    let values = grid.values();
    if y <= values[0] {
        return curve[0];
    }
    if y >= values[values.len() - 1] {
        return curve[curve.len() - 1];
    }
    let hi = values.partition_point(|v| *v <= y);
    let lo = hi - 1;
    let t = (y - values[lo]) / (values[hi] - values[lo]);
    curve[lo] + t * (curve[hi] - curve[lo])
}

/// A Wald interval for one quantile-bound endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldCi {
    pub tau: f64,
    pub arm: usize,
    pub endpoint: Side,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub density: f64,
}

/// Wald quantile-endpoint interval using the quantile influence function
/// `-phi/f` with a symmetric finite-difference density estimate over
/// `±bandwidth`. Rejects nonregular endpoints whose density estimate falls
/// below [`DENSITY_FLOOR`].
#[allow(clippy::too_many_arguments)]
pub fn wald_quantile_ci(
    proc: &CdfBoundProcess,
    phi: &EifEvaluation,
    tau: f64,
    arm: usize,
    s_idx: usize,
    endpoint: Side,
    alpha: f64,
    bandwidth: f64,
) -> Result<WaldCi, InferenceError> {
    // q^- inverts the upper envelope; q^+ the lower envelope.
    let curve_side = match endpoint {
        Side::Lower => Side::Upper,
        Side::Upper => Side::Lower,
    };
    let curve = proc.curve(s_idx, arm, curve_side);
    let grid = proc.grid();
    let q = invert_curve(grid, curve, tau)?;
    let f_hat =
        (interp(grid, curve, q + bandwidth) - interp(grid, curve, q - bandwidth)) / (2.0 * bandwidth);
    if f_hat < DENSITY_FLOOR {
        return Err(InferenceError::DensityFloor { f: f_hat });
    }
    let y_idx = grid.values().partition_point(|v| *v < q);
    let col = proc.flat_index(s_idx, arm, curve_side, y_idx.min(grid.len() - 1));
    let sd = phi.column_sd(col);
    let se = sd / f_hat / (phi.n as f64).sqrt();
    let z = standard_normal_quantile(1.0 - alpha / 2.0);
    Ok(WaldCi { tau, arm, endpoint, estimate: q, se, lo: q - z * se, hi: q + z * se, density: f_hat })
}

pub(crate) fn standard_normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Inner/outer confidence sets and the outer zero-level nodes for the
/// non-refutation region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierConfidence {
    pub d: f64,
    pub n: usize,
    /// Node membership: `kappa - d/sqrt(n) >= 0`.
    pub inner: Vec<bool>,
    /// Node membership: `kappa + d/sqrt(n) >= 0`.
    pub outer: Vec<bool>,
    /// Zero-level points of `kappa + d/sqrt(n)` located by sign changes
    /// along grid edges with linear interpolation, in `(gamma, lambda)`.
    pub zero_level: Vec<(f64, f64)>,
}

/// Inner and outer sensitivity-region confidence sets at critical value `d`,
/// with the interpolated zero-level set of the outer statistic.
pub fn frontier_confidence(frontier: &FrontierGrid, d: f64, n: usize) -> FrontierConfidence {
    let shift = d / (n as f64).sqrt();
    let inner: Vec<bool> = frontier.kappa.iter().map(|k| k - shift >= 0.0).collect();
    let outer: Vec<bool> = frontier.kappa.iter().map(|k| k + shift >= 0.0).collect();
    let zero_level = zero_level_nodes(frontier, shift);
    FrontierConfidence { d, n, inner, outer, zero_level }
}

/// Zero-level points of `kappa + shift` along mesh edges.
pub fn zero_level_nodes(frontier: &FrontierGrid, shift: f64) -> Vec<(f64, f64)> {
    let (ng, nl) = frontier.mesh;
    let g = |i: usize, j: usize| frontier.kappa[i * nl + j] + shift;
    let node = |i: usize, j: usize| {
        let s = frontier.nodes[i * nl + j];
        (s.gamma(), s.lambda())
    };
    let mut points = Vec::new();
    let mut push_crossing = |a: (f64, f64), b: (f64, f64), ga: f64, gb: f64| {
        if ga == 0.0 {
            points.push(a);
        } else if (ga < 0.0) != (gb < 0.0) {
            let t = ga / (ga - gb);
            points.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    };
    for i in 0..ng {
        for j in 0..nl {
            if i + 1 < ng {
                push_crossing(node(i, j), node(i + 1, j), g(i, j), g(i + 1, j));
            }
            if j + 1 < nl {
                push_crossing(node(i, j), node(i, j + 1), g(i, j), g(i, j + 1));
            }
        }
    }
    points
}

/// Hausdorff distance between two nonempty point sets in the
/// `(gamma, lambda)` plane.
pub fn hausdorff(set_a: &[(f64, f64)], set_b: &[(f64, f64)]) -> Result<f64, InferenceError> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(InferenceError::EmptySet);
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0_f64, f64::max)
    };
    Ok(directed(set_a, set_b).max(directed(set_b, set_a)))
}

/// Per-observation influence column for one quantile-bound endpoint:
/// `IF{q} = -phi / f` evaluated at the inverted endpoint, using the same
/// finite-difference density estimate and floor as the Wald interval.
pub fn quantile_if_column(
    proc: &CdfBoundProcess,
    phi: &EifEvaluation,
    tau: f64,
    arm: usize,
    s_idx: usize,
    endpoint: Side,
    bandwidth: f64,
) -> Result<Vec<f64>, InferenceError> {
    let curve_side = match endpoint {
        Side::Lower => Side::Upper,
        Side::Upper => Side::Lower,
    };
    let curve = proc.curve(s_idx, arm, curve_side);
    let grid = proc.grid();
    let q = invert_curve(grid, curve, tau)?;
    let f_hat = (interp(grid, curve, q + bandwidth) - interp(grid, curve, q - bandwidth))
        / (2.0 * bandwidth);
    if f_hat < DENSITY_FLOOR {
        return Err(InferenceError::DensityFloor { f: f_hat });
    }
    let y_idx = grid.values().partition_point(|v| *v < q).min(grid.len() - 1);
    let col = proc.flat_index(s_idx, arm, curve_side, y_idx);
    Ok((0..phi.n).map(|i| -phi.row(i)[col] / f_hat).collect())
}

/// Branch-selected influence column for `kappa = min{delta_hi, -delta_lo}`
/// at one sensitivity node, built from Wald quantile influence functions.
/// Only valid on the separated branch region; the caller enforces the
/// min-gap condition.
fn kappa_influence_column(
    proc: &CdfBoundProcess,
    phi: &EifEvaluation,
    tau: f64,
    s_idx: usize,
    bandwidth: f64,
) -> Result<(Vec<f64>, f64), InferenceError> {
    let (q1_lo, q1_hi) = crate::bounds::quantile_bounds(proc, tau, 1, s_idx)?;
    let (q0_lo, q0_hi) = crate::bounds::quantile_bounds(proc, tau, 0, s_idx)?;
    let delta_lo = q1_lo - q0_hi;
    let delta_hi = q1_hi - q0_lo;
    let gap = (delta_hi + delta_lo).abs();
    if delta_hi < -delta_lo {
        // kappa = delta_hi = q1^+ - q0^-: phi_kappa = IF{q1^+} - IF{q0^-}.
        let if1 = quantile_if_column(proc, phi, tau, 1, s_idx, Side::Upper, bandwidth)?;
        let if0 = quantile_if_column(proc, phi, tau, 0, s_idx, Side::Lower, bandwidth)?;
        Ok((if1.iter().zip(&if0).map(|(a, b)| a - b).collect(), gap))
    } else {
        // kappa = -delta_lo = q0^+ - q1^-: phi_kappa = IF{q0^+} - IF{q1^-}.
        let if0 = quantile_if_column(proc, phi, tau, 0, s_idx, Side::Upper, bandwidth)?;
        let if1 = quantile_if_column(proc, phi, tau, 1, s_idx, Side::Lower, bandwidth)?;
        Ok((if0.iter().zip(&if1).map(|(a, b)| a - b).collect(), gap))
    }
}

/// Multiplier critical value for the non-refutation surface via the
/// branch-selected kappa influence functions, available only when the two
/// branches are separated by more than twice the threshold-grid spacing at
/// every node.
pub fn kappa_multiplier_critical(
    proc: &CdfBoundProcess,
    phi: &EifEvaluation,
    tau: f64,
    alpha: f64,
    n_draws: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<f64, InferenceError> {
    if phi.n == 0 {
        return Err(InferenceError::EmptyPhi);
    }
    let spacing = proc.grid().spacing();
    let n_nodes = proc.s_points().len();
    let mut columns = Vec::with_capacity(n_nodes);
    for s_idx in 0..n_nodes {
        let (col, gap) = kappa_influence_column(proc, phi, tau, s_idx, bandwidth)?;
        if gap <= 2.0 * spacing {
            return Err(InferenceError::MinGap { gap, spacing });
        }
        columns.push(col);
    }
    if n_draws < 99 {
        return Err(InferenceError::TooFewDraws(n_draws));
    }
    let n = phi.n;
    let scale = 1.0 / (n as f64).sqrt();
    let stats: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, draw, 0));
            let mut acc = vec![0.0; n_nodes];
            for i in 0..n {
                let xi: f64 = rng.sample(StandardNormal);
                for (a, col) in acc.iter_mut().zip(&columns) {
                    *a += xi * col[i];
                }
            }
            acc.iter().fold(0.0_f64, |m, z| m.max((z * scale).abs()))
        })
        .collect();
    Ok(upper_quantile(stats, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{frontier_scan, marginal_cdf_bounds, CovariateCells, SensitivityRect};
    use crate::dist::FiniteDist;
    use crate::estimate::NuisanceSet;
    
    use proptest::prelude::*;

    fn toy_process(curves: &[Vec<f64>], grid: ThresholdGrid) -> CdfBoundProcess {
        // curves in (arm, side) order for a single s point.
        let values: Vec<f64> = curves.concat();
        CdfBoundProcess::from_values(
            grid,
            vec![SensitivityPair::point_identified()],
            values,
        )
        .unwrap()
    }

    fn phi_from_columns(n: usize, columns: Vec<Vec<f64>>) -> EifEvaluation {
        let n_indices = columns.len();
        let mut values = vec![0.0; n * n_indices];
        for (j, col) in columns.iter().enumerate() {
            for i in 0..n {
                values[i * n_indices + j] = col[i];
            }
        }
        EifEvaluation::from_raw(n, n_indices, false, values)
    }

    #[test]
    fn zero_phi_gives_zero_critical() {
        let phi = phi_from_columns(50, vec![vec![0.0; 50]]);
        let c = multiplier_critical(&phi, 0.05, 200, 7).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_index_gaussian_matches_normal_quantile() {
        // With phi ~ N(0,1) i.i.d. and one index, the multiplier statistic
        // is |N(0,1)| for large n, so the 95% critical is near 1.96.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let col: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let phi = phi_from_columns(n, vec![col]);
        let c = multiplier_critical(&phi, 0.05, 800, 5).unwrap();
        assert!((c - 1.96).abs() < 0.1, "critical {c}");
    }

    #[test]
    fn draw_guard() {
        let phi = phi_from_columns(10, vec![vec![1.0; 10]]);
        assert!(matches!(
            multiplier_critical(&phi, 0.05, 98, 1),
            Err(InferenceError::TooFewDraws(98))
        ));
    }

    #[test]
    fn band_monotone_envelopes() {
        let grid = ThresholdGrid::equally_spaced(0.0, 2.0, 3).unwrap();
        // Raw lower (0.2, 0.1, 0.3) must monotonize to (0.2, 0.2, 0.3).
        let psi = vec![0.2, 0.1, 0.3];
        let curves = vec![psi.clone(), psi.clone(), psi.clone(), psi];
        let proc = toy_process(&curves, grid);
        let bands = build_bands(&proc, 0.0, 100, 0.05);
        assert_eq!(bands.lower_curve(0, 0, Side::Lower), &[0.2, 0.2, 0.3]);
        assert_eq!(bands.raw_lower_curve(0, 0, Side::Lower), &[0.2, 0.1, 0.3]);
        assert_eq!(bands.upper_curve(0, 0, Side::Lower), &[0.1, 0.1, 0.3]);
    }

    #[test]
    fn inversion_on_degenerate_band() {
        let grid = ThresholdGrid::equally_spaced(0.0, 2.0, 3).unwrap();
        let jump = vec![0.0, 1.0, 1.0];
        let curves = vec![jump.clone(), jump.clone(), jump.clone(), jump];
        let proc = toy_process(&curves, grid);
        let bands = build_bands(&proc, 0.0, 100, 0.05);
        for ci in invert_bands(&bands, &[0.3, 0.7], 0, 0) {
            assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
            assert!(!ci.tail_truncated);
        }
    }

    #[test]
    fn tail_sentinel_flagged() {
        let grid = ThresholdGrid::equally_spaced(0.0, 2.0, 3).unwrap();
        let flat = vec![0.1, 0.2, 0.4];
        let curves = vec![flat.clone(), flat.clone(), flat.clone(), flat];
        let proc = toy_process(&curves, grid);
        let bands = build_bands(&proc, 0.0, 10_000, 0.05);
        let cis = invert_bands(&bands, &[0.9], 0, 0);
        assert!(cis.iter().all(|ci| ci.tail_truncated && ci.hi == 2.0));
    }

    #[test]
    fn qte_outer_band_identical_arms() {
        let grid = ThresholdGrid::equally_spaced(0.0, 2.0, 5).unwrap();
        let law = FiniteDist::new(vec![0.5, 1.0, 1.5], vec![0.25, 0.5, 0.25]).unwrap();
        let cells = CovariateCells::new(vec![1.0], vec![1.0]).unwrap();
        let p: Vec<f64> = grid.values().iter().map(|y| law.cdf(*y)).collect();
        let nuis = NuisanceSet::from_population(
            grid,
            cells,
            vec![0.5],
            vec![p.clone()],
            vec![p],
        )
        .unwrap();
        let proc = marginal_cdf_bounds(&nuis, &[SensitivityPair::point_identified()]).unwrap();
        let bands = build_bands(&proc, 0.0, 100, 0.05);
        let cis1 = invert_bands(&bands, &[0.5], 1, 0);
        let cis0 = invert_bands(&bands, &[0.5], 0, 0);
        let (lo, hi) = qte_outer_band(&cis1[0], &cis1[1], &cis0[0], &cis0[1]);
        assert_eq!((lo, hi), (0.0, 0.0));
    }

    #[test]
    fn wald_density_floor_fires_on_flat_region() {
        let grid = ThresholdGrid::equally_spaced(0.0, 10.0, 11).unwrap();
        // Nearly flat CDF stretch: slope 1e-4 through the quantile region.
        let mut curve: Vec<f64> = (0..11).map(|j| 0.5 + 1e-4 * j as f64).collect();
        curve[0] = 0.0;
        curve[10] = 1.0;
        let curves = vec![curve.clone(), curve.clone(), curve.clone(), curve];
        let proc = toy_process(&curves, grid);
        let phi = phi_from_columns(40, vec![vec![0.1; 40]; proc.n_indices()]);
        let err = wald_quantile_ci(&proc, &phi, 0.5005, 0, 0, Side::Lower, 0.05, 2.0).unwrap_err();
        assert!(matches!(err, InferenceError::DensityFloor { .. }));
    }

    #[test]
    fn frontier_sets_nest() {
        let grid = ThresholdGrid::equally_spaced(-1.0, 3.0, 41).unwrap();
        let arm1 = FiniteDist::new(vec![-0.5, 0.5, 1.5], vec![0.3, 0.4, 0.3]).unwrap();
        let arm0 = FiniteDist::new(vec![0.0, 1.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let cells = CovariateCells::new(vec![1.0], vec![1.0]).unwrap();
        let p1: Vec<f64> = grid.values().iter().map(|y| arm1.cdf(*y)).collect();
        let p0: Vec<f64> = grid.values().iter().map(|y| arm0.cdf(*y)).collect();
        let nuis =
            NuisanceSet::from_population(grid, cells, vec![0.5], vec![p0], vec![p1]).unwrap();
        let rect = SensitivityRect::new(3.0, 2.5).unwrap();
        let mesh = (9, 9);
        let nodes = rect.mesh_points(mesh).unwrap();
        let proc = marginal_cdf_bounds(&nuis, &nodes).unwrap();
        let frontier = frontier_scan(&proc, 0.5, &rect, mesh).unwrap();
        let conf = frontier_confidence(&frontier, 0.8, 400);
        let plug = frontier.non_refuting();
        for i in 0..plug.len() {
            assert!(!conf.inner[i] || plug[i], "inner within plug-in");
            assert!(!plug[i] || conf.outer[i], "plug-in within outer");
        }
        // d = 0 collapses both to the plug-in set.
        let conf0 = frontier_confidence(&frontier, 0.0, 400);
        assert_eq!(conf0.inner, plug);
        assert_eq!(conf0.outer, plug);
    }

    #[test]
    fn hausdorff_basics() {
        assert!(hausdorff(&[], &[(0.0, 0.0)]).is_err());
        let a = [(1.0, 1.0), (2.0, 1.0)];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&[(1.0, 1.0)], &[(2.0, 1.0)]).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn band_envelopes_preserve_containment(
            steps in proptest::collection::vec(0.0f64..0.2, 5..25),
            noise in proptest::collection::vec(-0.04f64..0.04, 5..25),
            c in 0.5f64..3.0,
        ) {
            // A monotone truth inside the raw bands stays inside the
            // monotone envelopes.
            let g = steps.len().min(noise.len());
            let mut truth = Vec::with_capacity(g);
            let mut acc = 0.0;
            for s in steps.iter().take(g) {
                acc += s;
                truth.push(acc);
            }
            let top = truth[g - 1].max(1e-9);
            for v in truth.iter_mut() {
                *v /= top;
            }
            let n = 400usize;
            let half = c / (n as f64).sqrt();
            // Raw estimate = truth + noise, capped so the raw bands contain
            // the truth pointwise.
            let psi: Vec<f64> = truth
                .iter()
                .zip(&noise)
                .map(|(t, e)| (t + e.clamp(-half, half)).clamp(0.0, 1.0))
                .collect();
            let grid = ThresholdGrid::equally_spaced(0.0, 1.0, g).unwrap();
            let curves = [psi.clone(), psi.clone(), psi.clone(), psi];
            let proc = CdfBoundProcess::from_values(
                grid,
                vec![SensitivityPair::point_identified()],
                curves.concat(),
            )
            .unwrap();
            let bands = build_bands(&proc, c, n, 0.05);
            prop_assert!(bands.contains_curve(0, 0, Side::Lower, &truth));
            // Monotone envelopes stay ordered.
            for (lo, hi) in bands
                .lower_curve(0, 0, Side::Lower)
                .iter()
                .zip(bands.upper_curve(0, 0, Side::Lower))
            {
                prop_assert!(lo <= hi);
            }
            // Inversion ordering.
            for ci in invert_bands(&bands, &[0.25, 0.5, 0.75], 0, 0) {
                prop_assert!(ci.lo <= ci.hi);
            }
        }
    }
}

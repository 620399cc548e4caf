//! Finite-support sharpness and non-collapse audit.
//!
//! Random conditional cells (Dirichlet masses, random propensities and
//! thresholds, sensitivity pairs from a fixed menu) are pushed through three
//! independent routes: the closed-form nested envelope, the exact two-layer
//! simplex program, and the fractional-greedy construction. The report also
//! tracks the product-relaxation comparison and whole-path tilt audits.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::FiniteDist;
use crate::envelope::{
    ell_u, g_nested_raw, product_relaxation_raw, SensitivityPair, Side, UnitProb,
};
use crate::lp::{greedy_two_layer, solve_two_layer};
use crate::tilt::{lower_tilt, upper_tilt};

use super::SimError;

/// Sensitivity values exercised by the audit.
pub const SENSITIVITY_MENU: [f64; 8] = [1.0, 1.05, 1.25, 1.5, 2.0, 3.0, 5.0, 8.0];

/// One randomly generated finite-support audit cell.
#[derive(Debug, Clone)]
pub struct AuditCase {
    pub dist: FiniteDist,
    pub e: f64,
    pub s: SensitivityPair,
    /// Threshold defining the event `{Y <= threshold}`; may fall below the
    /// support (empty event) or at the top atom (full event).
    pub threshold: f64,
}

fn dirichlet_masses(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(2.0, 1.0).expect("valid shape");
    let mut masses: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let total: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= total);
    masses
}

/// Generate `n_cases` audit cells cycling through the support sizes in
/// `k_list`, deterministic in the seed.
pub fn gen_audit_cells(seed: u64, k_list: &[usize], n_cases: usize) -> Vec<AuditCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let k = k_list[i % k_list.len()].max(1);
        let masses = dirichlet_masses(k, &mut rng);
        let atoms: Vec<f64> = (0..k).map(|j| j as f64).collect();
        let dist = FiniteDist::new(atoms, masses).expect("generated masses are valid");
        let e = rng.random_range(0.05..0.95);
        let s = SensitivityPair::new(
            *SENSITIVITY_MENU.choose(&mut rng).expect("menu non-empty"),
            *SENSITIVITY_MENU.choose(&mut rng).expect("menu non-empty"),
        )
        .expect("menu values are valid");
        // Mostly interior events, with boundary events mixed in so the
        // p = 0 and p = 1 limits stay covered.
        let threshold = match rng.random_range(0..10) {
            0 => -1.0,
            1 => (k - 1) as f64,
            _ => rng.random_range(0..k) as f64,
        };
        cases.push(AuditCase { dist, e, s, threshold });
    }
    cases
}

/// Audit metrics mirroring the finite-support diagnostics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub lp_cases: usize,
    pub algebraic_cases: usize,
    pub path_cases: usize,
    pub max_lp_discrepancy_lower: f64,
    pub max_lp_discrepancy_upper: f64,
    pub boundary_max_discrepancy: f64,
    pub max_simplex_greedy_gap: f64,
    pub mean_product_overwidth: f64,
    pub strict_share_all: f64,
    pub strict_share_nontrivial: f64,
    pub product_dominance_violations: usize,
    pub max_path_violation: f64,
    pub analytic_nested_lower: f64,
    pub analytic_product_lower: f64,
    pub elapsed_seconds: f64,
}

/// Run the three audit layers: exact LP solves on `n_lp` cells, vectorized
/// algebraic non-collapse cases, and whole-path tilt audits.
pub fn run_audit(
    seed: u64,
    k_list: &[usize],
    n_lp: usize,
    n_algebraic: usize,
    n_path: usize,
) -> Result<AuditReport, SimError> {
    let start = std::time::Instant::now();

    // Layer 1: exact linear programs versus the closed form.
    let cases = gen_audit_cells(seed, k_list, n_lp);
    let lp_metrics: Result<Vec<(f64, f64, f64, f64)>, SimError> = cases
        .par_iter()
        .map(|case| {
            let p = UnitProb::new(case.dist.cdf(case.threshold)).expect("cdf in range");
            let e = UnitProb::new(case.e).expect("generated in range");
            let boundary = p.value() == 0.0 || p.value() == 1.0;
            let mut lower_gap = 0.0;
            let mut upper_gap = 0.0;
            let mut boundary_gap = 0.0_f64;
            let mut greedy_gap = 0.0_f64;
            for side in Side::BOTH {
                let closed = g_nested_raw(
                    p.value(),
                    case.e,
                    case.s.gamma(),
                    case.s.lambda(),
                    side,
                );
                let lp = solve_two_layer(&case.dist, case.threshold, e, case.s, side)
                    .map_err(|err| SimError::Config(err.to_string()))?;
                let greedy = greedy_two_layer(&case.dist, case.threshold, e, case.s, side)
                    .map_err(|err| SimError::Config(err.to_string()))?;
                let gap = (closed - lp.value).abs();
                match side {
                    Side::Lower => lower_gap = gap,
                    Side::Upper => upper_gap = gap,
                }
                if boundary {
                    boundary_gap = boundary_gap.max(gap);
                }
                greedy_gap = greedy_gap.max((lp.value - greedy.value).abs());
            }
            Ok((lower_gap, upper_gap, boundary_gap, greedy_gap))
        })
        .collect();
    let lp_metrics = lp_metrics?;
    let max_lp_discrepancy_lower =
        lp_metrics.iter().map(|m| m.0).fold(0.0, f64::max);
    let max_lp_discrepancy_upper =
        lp_metrics.iter().map(|m| m.1).fold(0.0, f64::max);
    let boundary_max_discrepancy =
        lp_metrics.iter().map(|m| m.2).fold(0.0, f64::max);
    let max_simplex_greedy_gap = lp_metrics.iter().map(|m| m.3).fold(0.0, f64::max);

    // Layer 2: algebraic non-collapse diagnostics on scalar cases.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let mut overwidth_sum = 0.0;
    let mut strict_all = 0usize;
    let mut strict_nontrivial = 0usize;
    let mut nontrivial = 0usize;
    let mut dominance_violations = 0usize;
    for _ in 0..n_algebraic {
        let p = rng.random_range(0.0..=1.0);
        let e = rng.random_range(0.01..0.99);
        let gamma = *SENSITIVITY_MENU.choose(&mut rng).expect("menu");
        let lambda = *SENSITIVITY_MENU.choose(&mut rng).expect("menu");
        let nest_lo = g_nested_raw(p, e, gamma, lambda, Side::Lower);
        let nest_hi = g_nested_raw(p, e, gamma, lambda, Side::Upper);
        let prod_lo = product_relaxation_raw(p, e, gamma, lambda, Side::Lower);
        let prod_hi = product_relaxation_raw(p, e, gamma, lambda, Side::Upper);
        let w_nest = nest_hi - nest_lo;
        let w_prod = prod_hi.clamp(0.0, 1.0) - prod_lo.clamp(0.0, 1.0);
        if w_prod < w_nest - 1e-10 {
            dominance_violations += 1;
        }
        overwidth_sum += w_prod - w_nest;
        let strict = w_prod > w_nest + 1e-10;
        if strict {
            strict_all += 1;
        }
        if gamma > 1.0 && lambda > 1.0 && p > 0.0 && p < 1.0 && w_nest > 0.0 {
            nontrivial += 1;
            if strict {
                strict_nontrivial += 1;
            }
        }
    }

    // Layer 3: whole-path audits of the threshold-tilt constructions.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ddb_a115);
    let mut max_path_violation = 0.0_f64;
    for i in 0..n_path {
        let k = k_list[i % k_list.len()].max(2);
        let masses = dirichlet_masses(k, &mut rng);
        let atoms: Vec<f64> = (0..k).map(|j| j as f64).collect();
        let base = FiniteDist::new(atoms, masses).expect("valid masses");
        let e = rng.random_range(0.05..0.95);
        let gamma = rng.random_range(1.0..6.0);
        let (ell, u) = ell_u(e, gamma);
        for (side, apply) in [
            (Side::Lower, lower_tilt as fn(&FiniteDist, f64, f64) -> _),
            (Side::Upper, upper_tilt),
        ] {
            let (tilt, tilted) = apply(&base, ell, u);
            let cumulative = tilted.cumulative();
            for (j, (f, got)) in base.cumulative().iter().zip(&cumulative).enumerate() {
                let want = match side {
                    Side::Lower => (ell * f).max(1.0 - u * (1.0 - f)),
                    Side::Upper => (u * f).min(1.0 - ell * (1.0 - f)),
                };
                max_path_violation = max_path_violation.max((got - want).abs());
                let h = tilt.value_at(j);
                max_path_violation =
                    max_path_violation.max((ell - h).max(0.0)).max((h - u).max(0.0));
            }
            // Monotonicity and endpoint checks on the tilted CDF.
            for w in cumulative.windows(2) {
                max_path_violation = max_path_violation.max((w[0] - w[1]).max(0.0));
            }
            max_path_violation =
                max_path_violation.max((cumulative[cumulative.len() - 1] - 1.0).abs());
            let mass: f64 = base
                .masses()
                .iter()
                .enumerate()
                .map(|(j, m)| m * tilt.value_at(j))
                .sum();
            max_path_violation = max_path_violation.max((mass - 1.0).abs());
        }
    }

    // The analytic worked example pinned in the identification theory.
    let analytic_nested_lower = g_nested_raw(0.7, 0.1, 2.0, 1.5, Side::Lower);
    let analytic_product_lower = product_relaxation_raw(0.7, 0.1, 2.0, 1.5, Side::Lower);

    Ok(AuditReport {
        lp_cases: n_lp,
        algebraic_cases: n_algebraic,
        path_cases: n_path,
        max_lp_discrepancy_lower,
        max_lp_discrepancy_upper,
        boundary_max_discrepancy,
        max_simplex_greedy_gap,
        mean_product_overwidth: overwidth_sum / n_algebraic.max(1) as f64,
        strict_share_all: strict_all as f64 / n_algebraic.max(1) as f64,
        strict_share_nontrivial: strict_nontrivial as f64 / nontrivial.max(1) as f64,
        product_dominance_violations: dominance_violations,
        max_path_violation,
        analytic_nested_lower,
        analytic_product_lower,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

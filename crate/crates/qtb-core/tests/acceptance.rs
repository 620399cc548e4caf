//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured quantities (run with `--nocapture` to see
//! them). Tolerances are pinned in code; the Monte Carlo criteria share one
//! cached study run per experiment.

use std::sync::OnceLock;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use qtb_core::bounds::{marginal_cdf_bounds, qte_hull, quantile_bounds};
use qtb_core::dist::FiniteDist;
use qtb_core::envelope::{
    classify_branches, directional_derivative, ell_u, envelope_derivatives, g_nested,
    product_relaxation, Side, UnitProb,
};
use qtb_core::estimate::{
    ablation_estimates, estimate_nuisances, one_step_estimate, AblationVariant, DesignMode,
};
use qtb_core::inference::build_bands;
use qtb_core::sim::{
    gen_audit_cells, run_audit, run_experiment2, run_experiment4, MetricsReport, RegularDgp,
    RegularDgpSpec, StudyConfig, ZeroInflatedDgp, ZeroInflatedDgpSpec,
};
use qtb_core::tilt::{lower_tilt, upper_tilt};
use qtb_core::SensitivityPair;

fn up(v: f64) -> UnitProb {
    UnitProb::new(v).unwrap()
}

fn s(gamma: f64, lambda: f64) -> SensitivityPair {
    SensitivityPair::new(gamma, lambda).unwrap()
}

#[test]
fn criterion_01_analytic_non_collapse_example() {
    let sp = s(2.0, 1.5);
    let c_lower = qtb_core::envelope::c_envelope(up(0.7), up(0.1), 2.0, Side::Lower).value();
    let nested = g_nested(up(0.7), up(0.1), sp, Side::Lower).value();
    let product = product_relaxation(up(0.7), up(0.1), sp, Side::Lower).value();
    assert!((c_lower - 0.43).abs() < 1e-12);
    assert!((nested - 0.286_666_666_666_666_7).abs() < 1e-12);
    assert!((product - 0.256_666_666_666_666_7).abs() < 1e-12);
    assert!(nested > product);
    println!(
        "acceptance criterion 1 (analytic non-collapse): PASS  C-={c_lower:.12}, nested={nested:.12}, product={product:.12}"
    );
}

#[test]
fn criterion_02_lp_audit() {
    let report = run_audit(20_240_802, &[2, 3, 5, 8, 12, 20], 504, 50_000, 0).unwrap();
    let max_gap = report.max_lp_discrepancy_lower.max(report.max_lp_discrepancy_upper);
    assert!(report.lp_cases >= 500);
    assert!(
        max_gap < 1e-8,
        "max closed-form vs LP discrepancy {max_gap:.3e} exceeds 1e-8"
    );
    assert_eq!(report.product_dominance_violations, 0, "product dominance violated");
    assert!(
        report.strict_share_nontrivial > 0.1,
        "strict non-collapse share {:.4} too small",
        report.strict_share_nontrivial
    );
    assert!(report.max_simplex_greedy_gap < 1e-8);
    println!(
        "acceptance criterion 2 (LP audit, {} cells): PASS  max gap={:.3e}, dominance violations=0, strict share={:.4}",
        report.lp_cases, max_gap, report.strict_share_nontrivial
    );
}

#[test]
fn criterion_03_path_attainment() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let gamma_dist = Gamma::new(2.0, 1.0).unwrap();
    let mut worst_cdf = 0.0_f64;
    let mut worst_norm = 0.0_f64;
    for case in 0..1000 {
        let k = 2 + case % 11;
        let mut masses: Vec<f64> = (0..k).map(|_| rng.sample(gamma_dist)).collect();
        let total: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= total);
        let atoms: Vec<f64> = (0..k).map(|j| j as f64).collect();
        let base = FiniteDist::new(atoms, masses).unwrap();
        let ell = rng.random_range(0.05..=1.0);
        let u = 1.0 + rng.random_range(0.0..4.0);
        for (side, apply) in [
            (Side::Lower, lower_tilt as fn(&FiniteDist, f64, f64) -> _),
            (Side::Upper, upper_tilt),
        ] {
            let (tilt, tilted) = apply(&base, ell, u);
            for (j, (f, got)) in
                base.cumulative().iter().zip(tilted.cumulative()).enumerate()
            {
                let want = match side {
                    Side::Lower => (ell * f).max(1.0 - u * (1.0 - f)),
                    Side::Upper => (u * f).min(1.0 - ell * (1.0 - f)),
                };
                worst_cdf = worst_cdf.max((got - want).abs());
                let h = tilt.value_at(j);
                assert!(
                    h >= ell - 1e-12 && h <= u + 1e-12,
                    "tilt value {h} outside [{ell}, {u}]"
                );
            }
            let mass: f64 = base
                .masses()
                .iter()
                .enumerate()
                .map(|(j, m)| m * tilt.value_at(j))
                .sum();
            worst_norm = worst_norm.max((mass - 1.0).abs());
        }
    }
    assert!(worst_cdf < 1e-10, "path attainment violation {worst_cdf:.3e}");
    assert!(worst_norm < 1e-12, "tilt normalization violation {worst_norm:.3e}");
    println!(
        "acceptance criterion 3 (path attainment, 1000 cases): PASS  max CDF gap={worst_cdf:.3e}, max normalization gap={worst_norm:.3e}"
    );
}

#[test]
fn criterion_04_reduction_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..10_000 {
        let p = up(rng.random_range(0.0..=1.0));
        let e = up(rng.random_range(0.0..=1.0));
        let g = rng.random_range(1.0..8.0);
        for side in Side::BOTH {
            assert_eq!(qtb_core::envelope::c_envelope(p, e, 1.0, side).value(), p.value());
            assert_eq!(qtb_core::envelope::t_envelope(p, 1.0, side).value(), p.value());
            assert_eq!(g_nested(p, e, s(1.0, 1.0), side).value(), p.value());
            assert_eq!(
                g_nested(p, e, s(g, 1.0), side).value(),
                qtb_core::envelope::c_envelope(p, e, g, side).value()
            );
            assert_eq!(
                g_nested(p, e, s(1.0, g), side).value(),
                qtb_core::envelope::t_envelope(p, g, side).value()
            );
        }
    }
    println!("acceptance criterion 4 (reduction identities, 10000 inputs): PASS  exact equality");
}

#[test]
fn criterion_05_derivative_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // Two-sided derivatives at branch-regular points.
    let mut checked = 0;
    let mut worst = 0.0_f64;
    while checked < 1000 {
        let p = rng.random_range(0.01..0.99);
        let e = rng.random_range(0.05..0.95);
        let sp = s(rng.random_range(1.05..6.0), rng.random_range(1.05..6.0));
        let side = if rng.random::<bool>() { Side::Lower } else { Side::Upper };
        let branches = classify_branches(up(p), up(e), sp, side);
        if branches.c_margin < 1e-4 || branches.t_margin < 1e-4 {
            continue; // finite differences would straddle the kink
        }
        let d = envelope_derivatives(up(p), up(e), sp, side).unwrap();
        let step = 1e-6;
        let g = |p: f64, e: f64| {
            g_nested(up(p.clamp(0.0, 1.0)), up(e.clamp(0.0, 1.0)), sp, side).value()
        };
        let fd_p = (g(p + step, e) - g(p - step, e)) / (2.0 * step);
        let fd_e = (g(p, e + step) - g(p, e - step)) / (2.0 * step);
        worst = worst.max((d.d_p - fd_p).abs()).max((d.d_e - fd_e).abs());
        checked += 1;
    }
    assert!(worst < 1e-6, "derivative vs central difference gap {worst:.3e}");

    // Directional derivatives at switch-surface ties.
    let mut worst_dir = 0.0_f64;
    for case in 0..200 {
        let e = rng.random_range(0.1..0.9);
        let gamma = rng.random_range(1.2..4.0);
        let lambda = rng.random_range(1.2..3.0);
        let sp = s(gamma, lambda);
        let side = if case % 2 == 0 { Side::Lower } else { Side::Upper };
        let (ell, u) = ell_u(e, gamma);
        // Alternate between source-layer ties and transport-layer ties.
        let p = if case % 4 < 2 {
            match side {
                Side::Lower => gamma / (gamma + 1.0),
                Side::Upper => 1.0 / (gamma + 1.0),
            }
        } else {
            // Pull the transport switch back through the active source piece.
            let q_star = match side {
                Side::Lower => lambda / (lambda + 1.0),
                Side::Upper => 1.0 / (lambda + 1.0),
            };
            let (p_star, pieces) = match side {
                Side::Lower => (gamma / (gamma + 1.0), [(0.0, ell), (1.0 - u, u)]),
                Side::Upper => (1.0 / (gamma + 1.0), [(0.0, u), (1.0 - ell, ell)]),
            };
            let q_at_star = pieces[0].0 + pieces[0].1 * p_star;
            let (c0, c1) = pieces[usize::from(q_star > q_at_star)];
            (q_star - c0) / c1
        };
        let h_p = rng.random_range(-1.0..1.0);
        let h_e = rng.random_range(-1.0..1.0);
        let v = directional_derivative(up(p), up(e), sp, side, h_p, h_e);
        let t = 1e-7;
        let g = |p: f64, e: f64| {
            g_nested(up(p.clamp(0.0, 1.0)), up(e.clamp(0.0, 1.0)), sp, side).value()
        };
        let fd = (g(p + t * h_p, e + t * h_e) - g(p, e)) / t;
        worst_dir = worst_dir.max((v - fd).abs());
    }
    assert!(worst_dir < 1e-5, "directional vs one-sided difference gap {worst_dir:.3e}");
    println!(
        "acceptance criterion 5 (derivatives): PASS  two-sided gap={worst:.3e} (1000 pts), directional gap={worst_dir:.3e} (200 tie pts)"
    );
}

#[test]
fn criterion_06_orthogonality() {
    // Exact-expectation drift of the one-step score under joint nuisance
    // perturbations: halving the perturbation must quarter the drift.
    let dgp = RegularDgp::new(RegularDgpSpec {
        grid_size: 61,
        oracle_grid_size: 201,
        ..Default::default()
    })
    .unwrap();
    let sp = s(1.6, 1.4);
    let grid = &dgp.grid;
    let j_cells = dgp.spec.cells;
    let chi = true;

    // Truth per (arm, cell): propensity and CDF curve.
    let p_true = |arm: usize, x: usize, j: usize| {
        dgp.source_laws[arm][x].cdf(grid.values()[j])
    };
    let e_true = |arm: usize, x: usize| {
        if arm == 1 {
            dgp.e1[x]
        } else {
            1.0 - dgp.e1[x]
        }
    };
    // Bounded perturbation directions.
    let dp = |x: usize, p: f64| 0.9 * p * (1.0 - p) * if x.is_multiple_of(2) { 1.0 } else { -1.0 };
    let de = |x: usize, e: f64| 0.8 * e * (1.0 - e) * if x.is_multiple_of(3) { -1.0 } else { 1.0 };
    let dw = |x: usize| if x.is_multiple_of(2) { 0.5 } else { -0.4 };

    let drift = |t: f64, arm: usize, side: Side, j: usize| -> f64 {
        // psi at truth for this index.
        let mut psi_true = 0.0;
        for x in 0..j_cells {
            psi_true += dgp.target_w[x]
                * g_nested(up(p_true(arm, x, j)), up(e_true(arm, x)), sp, side).value();
        }
        let mut score = -psi_true;
        for x in 0..j_cells {
            let p0 = p_true(arm, x, j);
            let e0 = e_true(arm, x);
            let omega0 = dgp.target_w[x] / dgp.source_w[x];
            let p_t = (p0 + t * dp(x, p0)).clamp(0.0, 1.0);
            let e_t = (e0 + t * de(x, e0)).clamp(0.01, 0.99);
            let w_t = omega0 * (1.0 + t * dw(x));
            let b_t = g_nested(up(p_t), up(e_t), sp, side).value();
            score += dgp.target_w[x] * b_t;
            let d = envelope_derivatives(up(p_t), up(e_t), sp, side)
                .expect("perturbed point stays branch-regular");
            let zeta_mean =
                d.d_p * (e0 / e_t) * (p0 - p_t) + if chi { d.d_e * (e0 - e_t) } else { 0.0 };
            score += dgp.source_w[x] * w_t * zeta_mean;
        }
        score
    };

    let mut ratios = Vec::new();
    for arm in 0..2 {
        for side in Side::BOTH {
            for j in [15, 30, 45] {
                // Skip indices with branch ties anywhere on the perturbation
                // path; the expansion is quadratic only on a fixed branch.
                let regular = (0..j_cells).all(|x| {
                    let b = classify_branches(
                        up(p_true(arm, x, j)),
                        up(e_true(arm, x)),
                        sp,
                        side,
                    );
                    b.c_margin > 0.05 && b.t_margin > 0.05
                });
                if !regular {
                    continue;
                }
                let d1 = drift(0.1, arm, side, j);
                let d2 = drift(0.05, arm, side, j);
                let d4 = drift(0.025, arm, side, j);
                if d4.abs() < 1e-12 {
                    continue;
                }
                ratios.push(d1 / d2);
                ratios.push(d2 / d4);
            }
        }
    }
    assert!(ratios.len() >= 8, "too few regular indices for the orthogonality check");
    for r in &ratios {
        assert!(
            (2.8..=5.2).contains(r),
            "drift ratio {r:.3} outside 4 +/- 30% (ratios: {ratios:?})"
        );
    }
    let mean: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;
    println!(
        "acceptance criterion 6 (orthogonality): PASS  {} halving ratios, mean {:.3} (target 4 +/- 30%)",
        ratios.len(),
        mean
    );
}

fn experiment2_report() -> &'static MetricsReport {
    static REPORT: OnceLock<MetricsReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let dgp = RegularDgp::new(RegularDgpSpec::default()).unwrap();
        let cfg = StudyConfig { b: 100, n1_sizes: vec![1600], ..Default::default() };
        let variants = [
            (s(1.15, 1.10), "underspecified"),
            (s(1.60, 1.40), "true"),
            (s(2.20, 1.80), "overspecified"),
        ];
        run_experiment2(&dgp, &cfg, &variants).unwrap()
    })
}

#[test]
fn criterion_07_experiment2_desk_scale() {
    let report = experiment2_report();
    let row = |label: &str| {
        report
            .exp2
            .iter()
            .find(|r| r.label == label && r.n1 == 1600)
            .unwrap_or_else(|| panic!("missing row {label}"))
    };
    let truth = row("true");
    assert!(
        truth.qte_cover >= 0.95,
        "true-s simultaneous QTE coverage {:.3} below 0.95",
        truth.qte_cover
    );
    assert!(
        (0.89..=1.0).contains(&truth.cdf_cover),
        "true-s CDF coverage {:.3} outside [0.89, 1.00]",
        truth.cdf_cover
    );
    let under = row("underspecified");
    assert!(
        under.qte_cover <= 0.10,
        "underspecified QTE coverage {:.3} above 0.10",
        under.qte_cover
    );
    assert!(!under.truth_in_hull && truth.truth_in_hull);
    for (label, want) in [("underspecified", 0.465), ("true", 1.579), ("overspecified", 2.689)] {
        let got = row(label).pop_width;
        assert!(
            (got - want).abs() <= 0.05,
            "population hull width at {label}: {got:.4} vs {want} (tolerance 0.05)"
        );
    }
    println!(
        "acceptance criterion 7 (experiment 2, B=100, n1=1600): PASS  qte_cover(true)={:.3}, cdf_cover(true)={:.3}, qte_cover(under)={:.3}, pop widths=({:.3}, {:.3}, {:.3})",
        truth.qte_cover,
        truth.cdf_cover,
        under.qte_cover,
        row("underspecified").pop_width,
        row("true").pop_width,
        row("overspecified").pop_width
    );
}

fn experiment4_report() -> &'static MetricsReport {
    static REPORT: OnceLock<MetricsReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let dgp = ZeroInflatedDgp::new(ZeroInflatedDgpSpec::default()).unwrap();
        let cfg =
            StudyConfig { b: 100, n1_sizes: vec![500, 1000, 2000], ..Default::default() };
        run_experiment4(&dgp, &cfg).unwrap()
    })
}

#[test]
fn criterion_08_experiment4_desk_scale() {
    let report = experiment4_report();
    let row = |method: &str, n1: usize| {
        report
            .exp4
            .iter()
            .find(|r| r.method == method && r.n1 == n1)
            .unwrap_or_else(|| panic!("missing row {method} at n1={n1}"))
    };
    let band = row("subsample_0.6", 1000);
    let wald = row("wald", 1000);
    assert!(
        wald.qte_cover <= band.qte_cover - 0.2,
        "Wald coverage {:.3} not at least 0.2 below band coverage {:.3}",
        wald.qte_cover,
        band.qte_cover
    );
    let outer = band.frontier_outer_cover.expect("frontier computed for subsample_0.6");
    assert!(outer >= 0.90, "frontier outer coverage {outer:.3} below 0.90");
    let haus: Vec<f64> = [500, 1000, 2000]
        .iter()
        .map(|n1| row("subsample_0.6", *n1).hausdorff.expect("hausdorff recorded"))
        .collect();
    assert!(
        haus[0] >= haus[1] && haus[1] >= haus[2],
        "Hausdorff distances {haus:?} not monotone nonincreasing over sample sizes"
    );
    // Tip diagnostic: the plug-in tipping error at the largest size stays
    // within +/- 0.03 of the reference 0.046.
    let tip = row("subsample_0.6", 2000).plug_in_tip_err;
    assert!(
        (tip - 0.046).abs() <= 0.03,
        "plug-in tip error {tip:.3} outside 0.046 +/- 0.03"
    );
    println!(
        "acceptance criterion 8 (experiment 4, B=100): PASS  wald={:.3} vs band={:.3}, frontier outer={:.3}, hausdorff={:?}, tip err={:.3}",
        wald.qte_cover, band.qte_cover, outer, haus, tip
    );
}

#[test]
fn criterion_09_eif_mean_zero() {
    let report = experiment2_report();
    for row in &report.exp2 {
        assert!(
            row.eif_mean_zero_share >= 0.95,
            "EIF mean-zero share {:.3} below 0.95 for {} at n1={}",
            row.eif_mean_zero_share,
            row.label,
            row.n1
        );
    }
    println!(
        "acceptance criterion 9 (EIF mean-zero within criterion 7's study): PASS  min share={:.3}",
        report
            .exp2
            .iter()
            .map(|r| r.eif_mean_zero_share)
            .fold(1.0, f64::min)
    );
}

#[test]
fn criterion_10_noge_rmse_ordering() {
    // Propensity-stress finite-cell DGP: steep estimated propensities make
    // the G_e component of the score matter; dropping it must cost
    // endpoint accuracy in most replications.
    let dgp = RegularDgp::new(RegularDgpSpec {
        propensity_trunc: (0.05, 0.95),
        propensity_slope: 2.5,
        s0: s(2.0, 1.1),
        grid_size: 61,
        oracle_grid_size: 201,
        ..Default::default()
    })
    .unwrap();
    let sp = dgp.spec.s0;
    let taus = [0.25, 0.5, 0.75];
    let oracle_nuis = dgp.oracle_nuisances().unwrap();
    let oracle_proc = marginal_cdf_bounds(&oracle_nuis, &[sp]).unwrap();
    let oracle: Vec<(f64, f64)> =
        taus.iter().map(|tau| quantile_hull_endpoints(&oracle_proc, *tau)).collect();

    let b = 100;
    let n1 = 800;
    let mut wins = 0;
    for rep in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(9_000 + rep);
        let data = dgp.sample(n1, (1.5 * n1 as f64) as usize, &mut rng);
        let nuis =
            estimate_nuisances(&data, &dgp.grid, 5, 0.05, &DesignMode::Observational).unwrap();
        let dml = one_step_estimate(&data, &nuis, &[sp]).unwrap().process;
        let noge = ablation_estimates(&data, &nuis, &[sp], AblationVariant::NoGe).unwrap();
        let rmse = |proc: &qtb_core::bounds::CdfBoundProcess| -> f64 {
            let mut sq = 0.0;
            for (t_idx, tau) in taus.iter().enumerate() {
                let (lo, hi) = quantile_hull_endpoints(proc, *tau);
                sq += (lo - oracle[t_idx].0).powi(2) + (hi - oracle[t_idx].1).powi(2);
            }
            (sq / (2.0 * taus.len() as f64)).sqrt()
        };
        if rmse(&noge) >= rmse(&dml) {
            wins += 1;
        }
    }
    let share = wins as f64 / b as f64;
    assert!(
        share >= 0.6,
        "No-Ge endpoint RMSE >= DML RMSE in only {share:.2} of replications (need 0.6)"
    );
    println!(
        "acceptance criterion 10 (No-Ge RMSE ordering, B={b}): PASS  share={share:.2} (>= 0.60); ML-nuisance and real-data replications are out of scope by design"
    );
}

/// Hull endpoints of an estimated process via its monotone envelopes
/// (zero-width bands).
fn quantile_hull_endpoints(proc: &qtb_core::bounds::CdfBoundProcess, tau: f64) -> (f64, f64) {
    if proc.s_points().len() == 1 {
        // Monotone envelopes of the raw estimate, then generalized inverses.
        let bands = build_bands(proc, 0.0, 1, 0.05);
        let cis1 = qtb_core::inference::invert_bands(&bands, &[tau], 1, 0);
        let cis0 = qtb_core::inference::invert_bands(&bands, &[tau], 0, 0);
        qtb_core::inference::qte_outer_band(&cis1[0], &cis1[1], &cis0[0], &cis0[1])
    } else {
        let hull = qte_hull(proc, tau, 0).unwrap();
        (hull.delta_lo, hull.delta_hi)
    }
}

// Keep the audit-cell generator exercised from the integration surface as
// well: determinism and support sizes.
#[test]
fn audit_cells_cycle_supports_deterministically() {
    let cases = gen_audit_cells(5, &[2, 3, 5, 8, 12, 20], 12);
    let sizes: Vec<usize> = cases.iter().map(|c| c.dist.len()).collect();
    assert_eq!(sizes, vec![2, 3, 5, 8, 12, 20, 2, 3, 5, 8, 12, 20]);
    let again = gen_audit_cells(5, &[2, 3, 5, 8, 12, 20], 12);
    assert_eq!(cases.len(), again.len());
    for (a, b) in cases.iter().zip(&again) {
        assert_eq!(a.dist, b.dist);
    }
}

// The oracle-consistency separation check: feeding the estimator
// self-consistent empirical nuisances reproduces the population bounds of
// those cells to machine precision, separating Monte Carlo error from
// coding error.
#[test]
fn estimator_matches_population_bounds_on_self_consistent_cells() {
    use qtb_core::estimate::SampleRow;
    let mut rows = Vec::new();
    for cell in 0..3 {
        for (arm, ys) in [(0u8, [0.0, 2.0, 3.0]), (1u8, [1.0, 2.0, 4.0])] {
            for y in ys {
                rows.push(SampleRow::source(cell, arm, y + 0.1 * cell as f64));
                rows.push(SampleRow::source(cell, arm, y + 0.1 * cell as f64));
            }
        }
        rows.push(SampleRow::target(cell));
        rows.push(SampleRow::target(cell));
    }
    let data = qtb_core::estimate::TwoSampleData::new(rows).unwrap();
    let grid = qtb_core::dist::ThresholdGrid::equally_spaced(0.0, 4.5, 10).unwrap();
    let nuis = estimate_nuisances(&data, &grid, 2, 0.0, &DesignMode::Observational).unwrap();
    let pairs = [s(1.7, 1.3)];
    let fit = one_step_estimate(&data, &nuis, &pairs).unwrap();
    let oracle = marginal_cdf_bounds(&nuis, &pairs).unwrap();
    for (a, b) in fit.process.values().iter().zip(oracle.values()) {
        assert!((a - b).abs() < 1e-10, "estimator {a} vs population {b}");
    }
    for tau in [0.3, 0.6] {
        let (lo, hi) = quantile_bounds(&oracle, tau, 1, 0).unwrap();
        assert!(lo <= hi);
    }
}

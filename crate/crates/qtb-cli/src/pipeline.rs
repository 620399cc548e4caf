//! Subcommand implementations: orchestrate ingestion, estimation, inference,
//! and serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qtb_core::bounds::{
    frontier_scan, marginal_cdf_bounds, qte_hull, CovariateCells, SensitivityRect,
};
use qtb_core::dist::ThresholdGrid;
use qtb_core::estimate::{
    estimate_nuisances, one_step_estimate, one_step_process, DesignMode, NuisanceSet,
    TwoSampleData,
};

use qtb_core::inference::{
    build_bands, frontier_confidence, invert_bands, kappa_multiplier_critical,
    multiplier_criticals_blocks, qte_outer_band, subsample_critical, zero_level_nodes,
};
use qtb_core::sim::{
    run_audit, run_experiment2, run_experiment4, RegularDgp, RegularDgpSpec, StudyConfig,
    ZeroInflatedDgp, ZeroInflatedDgpSpec,
};
use qtb_core::SensitivityPair;

use crate::cli::{AuditArgs, BoundsArgs, Cli, Command, EstimateArgs, FrontierArgs, SimulateArgs};
use crate::config::AnalysisConfig;
use crate::ingest::{ingest_csv, SchemaConfig};
use crate::output::{
    ensure_dir, write_frontier_csv, write_json, write_phi_csv, write_psi_csv, HullRecord,
    QteIntervalRecord, ResultBundle,
};
use crate::CliError;

/// Dispatch a parsed command line. `QTB_THREADS` caps the worker pool.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(threads) = std::env::var("QTB_THREADS") {
        let threads: usize = threads
            .parse()
            .map_err(|_| CliError::Config(format!("QTB_THREADS must be an integer, got {threads}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Bounds(args) => cmd_bounds(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Frontier(args) => cmd_frontier(args),
    }
}

/// Population-style nuisance input: per-cell weights, propensities, and
/// source-arm CDF curves on an explicit grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceJson {
    pub grid: Vec<f64>,
    pub cells: Vec<NuisanceCellJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceCellJson {
    pub target_weight: f64,
    pub source_weight: f64,
    pub e1: f64,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
}

impl NuisanceJson {
    pub fn into_nuisances(self) -> Result<NuisanceSet, CliError> {
        let grid = ThresholdGrid::new(self.grid)?;
        let cells = CovariateCells::new(
            self.cells.iter().map(|c| c.target_weight).collect(),
            self.cells.iter().map(|c| c.source_weight).collect(),
        )?;
        let e1 = self.cells.iter().map(|c| c.e1).collect();
        let p0 = self.cells.iter().map(|c| c.p0.clone()).collect();
        let p1 = self.cells.iter().map(|c| c.p1.clone()).collect();
        NuisanceSet::from_population(grid, cells, e1, p0, p1)
            .map_err(CliError::Estimation)
    }
}

fn read_schema(path: Option<&Path>) -> Result<SchemaConfig, CliError> {
    match path {
        None => Ok(SchemaConfig::default()),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

/// Grid spanning the observed outcomes, padded so the top point carries the
/// full CDF.
fn grid_from_data(data: &TwoSampleData, size: usize) -> Result<ThresholdGrid, CliError> {
    let ys: Vec<f64> = data.rows().iter().filter_map(|r| r.y).collect();
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(CliError::Data("no finite outcomes in the source sample".into()));
    }
    let hi = if hi > lo { hi } else { lo + 1.0 };
    Ok(ThresholdGrid::equally_spaced(lo, hi, size.max(2))?)
}

struct LoadedInput {
    nuisances: NuisanceSet,
    data: Option<TwoSampleData>,
    warnings: Vec<String>,
}

fn load_input(
    data_args: &crate::cli::DataArgs,
    grid_size: usize,
    folds: usize,
    eta: f64,
    design: &DesignMode,
) -> Result<LoadedInput, CliError> {
    match (&data_args.nuisances, &data_args.input) {
        (Some(path), _) => {
            let json: NuisanceJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            Ok(LoadedInput { nuisances: json.into_nuisances()?, data: None, warnings: Vec::new() })
        }
        (None, Some(path)) => {
            let schema = read_schema(data_args.schema.as_deref())?;
            let ingested = ingest_csv(path, &schema)?;
            let data = ingested.data.retain_supported_targets()?;
            let grid = grid_from_data(&data, grid_size)?;
            let nuisances = estimate_nuisances(&data, &grid, folds, eta, design)?;
            Ok(LoadedInput { nuisances, data: Some(data), warnings: ingested.warnings })
        }
        (None, None) => Err(CliError::Config(
            "provide either --input data.csv or --nuisances nuisances.json".into(),
        )),
    }
}

fn parse_design(spec: &str) -> Result<DesignMode, CliError> {
    if spec == "observational" {
        return Ok(DesignMode::Observational);
    }
    if let Some(path) = spec.strip_prefix("known:") {
        let e1: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        return Ok(DesignMode::Known { e1 });
    }
    Err(CliError::Config(format!(
        "design must be 'observational' or 'known:<path>', got '{spec}'"
    )))
}

fn cmd_bounds(args: BoundsArgs) -> Result<(), CliError> {
    let config = AnalysisConfig {
        command: "bounds".into(),
        gammas: args.gamma.clone(),
        lambdas: args.lambda.clone(),
        taus: args.tau_list.clone(),
        alpha: 0.05,
        folds: args.folds,
        eta: args.eta,
        grid_size: args.grid_size,
        design: "observational".into(),
        method: String::new(),
        seed: args.io.seed,
    };
    config.validate()?;
    let pairs = config.sensitivity_pairs()?;
    let input = load_input(
        &args.data,
        args.grid_size,
        args.folds,
        args.eta,
        &DesignMode::Observational,
    )?;
    let proc = marginal_cdf_bounds(&input.nuisances, &pairs)?;
    let mut bundle = ResultBundle::new(config);
    bundle.warnings = input.warnings;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    for (s_idx, s) in pairs.iter().enumerate() {
        for tau in &args.tau_list {
            bundle.hulls.push(HullRecord {
                gamma: s.gamma(),
                lambda: s.lambda(),
                hull: qte_hull(&proc, *tau, s_idx)?,
            });
        }
    }
    ensure_dir(&args.io.out)?;
    write_psi_csv(&args.io.out.join("psi_grid.csv"), &proc)?;
    write_json(&args.io.out.join("hulls.json"), &bundle.hulls)?;
    bundle.psi = Some(proc);
    let path = bundle.write(&args.io.out)?;
    println!(
        "bounds: {} sensitivity pairs, {} hull records -> {}",
        pairs.len(),
        bundle.hulls.len(),
        path.display()
    );
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let design = parse_design(&args.design)?;
    let config = AnalysisConfig {
        command: "estimate".into(),
        gammas: args.gamma.clone(),
        lambdas: args.lambda.clone(),
        taus: Vec::new(),
        alpha: 0.05,
        folds: args.folds,
        eta: args.eta,
        grid_size: args.grid_size,
        design: args.design.clone(),
        method: String::new(),
        seed: args.io.seed,
    };
    config.validate()?;
    let pairs = config.sensitivity_pairs()?;
    let input = load_input(&args.data, args.grid_size, args.folds, args.eta, &design)?;
    let data = input.data.ok_or_else(|| {
        CliError::Config("estimate needs raw data (--input), not population nuisances".into())
    })?;
    let fit = one_step_estimate(&data, &input.nuisances, &pairs)?;
    ensure_dir(&args.io.out)?;
    write_psi_csv(&args.io.out.join("psi_hat.csv"), &fit.process)?;
    if !args.no_phi {
        write_phi_csv(&args.io.out.join("phi_matrix.csv"), &fit.phi)?;
    }
    let irregular = fit.regular.iter().filter(|r| !**r).count();
    let mut bundle = ResultBundle::new(config);
    bundle.warnings = input.warnings;

    // Inference stage: simultaneous bands inverted into QTE intervals.
    // Branch-regular index sets take the multiplier route; any tie routes
    // the whole run through recomputed subsampling.
    let g = input.nuisances.grid().len();
    let (criticals, method) = if irregular == 0 {
        let blocks: Vec<std::ops::Range<usize>> =
            (0..pairs.len()).map(|i| i * 4 * g..(i + 1) * 4 * g).collect();
        (
            multiplier_criticals_blocks(&fit.phi, &blocks, args.alpha, args.draws, args.io.seed)?,
            "multiplier".to_string(),
        )
    } else {
        bundle.warnings.push(format!(
            "{irregular} indices had tied active sets; using the subsampling route"
        ));
        let m = (data.n() as f64).powf(0.6).floor() as usize;
        let grid = input.nuisances.grid().clone();
        let folds = args.folds;
        let eta = args.eta;
        let design = design.clone();
        let clamp = |values: &[f64]| -> Vec<f64> {
            values.iter().map(|v| v.clamp(0.0, 1.0)).collect()
        };
        let pipeline = |sample: &TwoSampleData| {
            let sample = sample.retain_supported_targets()?;
            let nuis = estimate_nuisances(&sample, &grid, folds, eta, &design)?;
            Ok(clamp(one_step_process(&sample, &nuis, &pairs)?.values()))
        };
        let c = subsample_critical(
            &data,
            &pipeline,
            &clamp(fit.process.values()),
            m,
            args.draws,
            args.alpha,
            args.io.seed,
        )?;
        (vec![c; pairs.len()], format!("subsample:0.6 (m={m})"))
    };
    for (s_idx, s) in pairs.iter().enumerate() {
        let proc_s = fit.process.restrict(s_idx);
        let bands = build_bands(&proc_s, criticals[s_idx], data.n(), args.alpha);
        let plugin = build_bands(&proc_s, 0.0, data.n(), args.alpha);
        for &tau in &args.tau_list {
            let cis1 = invert_bands(&bands, &[tau], 1, 0);
            let cis0 = invert_bands(&bands, &[tau], 0, 0);
            let (band_lo, band_hi) = qte_outer_band(&cis1[0], &cis1[1], &cis0[0], &cis0[1]);
            let pis1 = invert_bands(&plugin, &[tau], 1, 0);
            let pis0 = invert_bands(&plugin, &[tau], 0, 0);
            let (delta_lo, delta_hi) = qte_outer_band(&pis1[0], &pis1[1], &pis0[0], &pis0[1]);
            bundle.qte_intervals.push(QteIntervalRecord {
                gamma: s.gamma(),
                lambda: s.lambda(),
                tau,
                delta_lo,
                delta_hi,
                band_lo,
                band_hi,
                critical: criticals[s_idx],
                method: method.clone(),
            });
        }
    }
    write_json(&args.io.out.join("qte_intervals.json"), &bundle.qte_intervals)?;

    bundle.psi = Some(fit.process);
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    let path = bundle.write(&args.io.out)?;
    println!(
        "estimate: n1={} n0={} cells={} indices={} intervals={} ({method}) -> {}",
        data.n1(),
        data.n0(),
        data.n_cells(),
        fit.phi.n_indices,
        bundle.qte_intervals.len(),
        path.display()
    );
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    let report = run_audit(args.io.seed, &args.supports, args.cases, args.algebraic, args.paths)?;
    ensure_dir(&args.io.out)?;
    let path = args.io.out.join("audit_report.json");
    write_json(&path, &report)?;
    println!(
        "audit: {} LP cells, max discrepancy {:.3e}/{:.3e}, dominance violations {}, strict share (nontrivial) {:.4} -> {}",
        report.lp_cases,
        report.max_lp_discrepancy_lower,
        report.max_lp_discrepancy_upper,
        report.product_dominance_violations,
        report.strict_share_nontrivial,
        path.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    ensure_dir(&args.io.out)?;
    match args.experiment {
        1 => {
            let cases = if args.full { 6_000 } else { 500 };
            let algebraic = if args.full { 200_000 } else { 20_000 };
            let paths = if args.full { 20_000 } else { 1_000 };
            let report =
                run_audit(args.io.seed, &[2, 3, 5, 8, 12, 20], cases, algebraic, paths)?;
            write_json(&args.io.out.join("experiment1.json"), &report)?;
            println!(
                "experiment 1: max LP discrepancy {:.3e}, path violation {:.3e}",
                report.max_lp_discrepancy_lower.max(report.max_lp_discrepancy_upper),
                report.max_path_violation
            );
        }
        2 => {
            let dgp = RegularDgp::new(RegularDgpSpec::default())?;
            let cfg = study_config(&args, vec![400, 800, 1600]);
            let variants = experiment2_variants();
            let report = run_experiment2(&dgp, &cfg, &variants)?;
            write_json(&args.io.out.join("experiment2.json"), &report)?;
            write_exp2_csv(&args.io.out.join("experiment2.csv"), &report)?;
            for row in &report.exp2 {
                println!(
                    "n1={} {:<14} qte_cover={:.3} cdf_cover={:.3} outer_width={:.3} pop_width={:.3}",
                    row.n1, row.label, row.qte_cover, row.cdf_cover, row.outer_width, row.pop_width
                );
            }
        }
        4 => {
            let dgp = ZeroInflatedDgp::new(ZeroInflatedDgpSpec::default())?;
            let mut cfg = study_config(&args, vec![500, 1000, 2000]);
            cfg.frontier_all_methods = args.full;
            let report = run_experiment4(&dgp, &cfg)?;
            write_json(&args.io.out.join("experiment4.json"), &report)?;
            write_exp4_csv(&args.io.out.join("experiment4.csv"), &report)?;
            for row in &report.exp4 {
                println!(
                    "n1={} {:<14} qte_cover={:.3} width={:.3} frontier_outer={:?} hausdorff={:?}",
                    row.n1, row.method, row.qte_cover, row.qte_width,
                    row.frontier_outer_cover, row.hausdorff
                );
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "experiment must be 1, 2, or 4 (3 is the out-of-scope ML study), got {other}"
            )))
        }
    }
    Ok(())
}

/// The three sensitivity rows of the regular experiment: underspecified,
/// generating, and overspecified pairs.
pub fn experiment2_variants() -> [(SensitivityPair, &'static str); 3] {
    [
        (SensitivityPair::new(1.15, 1.10).expect("valid"), "underspecified"),
        (SensitivityPair::new(1.60, 1.40).expect("valid"), "true"),
        (SensitivityPair::new(2.20, 1.80).expect("valid"), "overspecified"),
    ]
}

fn study_config(args: &SimulateArgs, default_sizes: Vec<usize>) -> StudyConfig {
    StudyConfig {
        b: if args.full { 300 } else { args.b },
        n1_sizes: args.sizes.clone().unwrap_or(default_sizes),
        draws: if args.full { 149 } else { 99 },
        seed: args.io.seed,
        ..Default::default()
    }
}

fn write_exp2_csv(path: &Path, report: &qtb_core::sim::MetricsReport) -> Result<(), CliError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "n1,n0,label,gamma,lambda,b,failures,truth_in_hull,qte_cover,qte_cover_se,cdf_cover,cdf_cover_se,hull_contain,plugin_cover,outer_width,plugin_width,pop_width,eif_mean_zero_share"
    )?;
    for r in &report.exp2 {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.n1, r.n0, r.label, r.gamma, r.lambda, r.b, r.failures, r.truth_in_hull,
            r.qte_cover, r.qte_cover_se, r.cdf_cover, r.cdf_cover_se, r.hull_contain,
            r.plugin_cover, r.outer_width, r.plugin_width, r.pop_width, r.eif_mean_zero_share
        )?;
    }
    Ok(())
}

fn write_exp4_csv(path: &Path, report: &qtb_core::sim::MetricsReport) -> Result<(), CliError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "n1,n0,method,b,failures,qte_cover,qte_cover_se,qte_width,hull_contain,frontier_outer_cover,frontier_inner_valid,hausdorff,plug_in_tip_err,density_floor_rate"
    )?;
    let opt = |v: &Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &report.exp4 {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.n1, r.n0, r.method, r.b, r.failures, r.qte_cover, r.qte_cover_se, r.qte_width,
            r.hull_contain, opt(&r.frontier_outer_cover), opt(&r.frontier_inner_valid),
            opt(&r.hausdorff), r.plug_in_tip_err, opt(&r.density_floor_rate)
        )?;
    }
    Ok(())
}

fn cmd_frontier(args: FrontierArgs) -> Result<(), CliError> {
    if args.s_rect.len() != 4 || args.s_rect[0] != 1.0 || args.s_rect[2] != 1.0 {
        return Err(CliError::Config(
            "--s-rect must be 1,<gamma_max>,1,<lambda_max>".into(),
        ));
    }
    if args.mesh.len() != 2 {
        return Err(CliError::Config("--mesh must be n_gamma,n_lambda".into()));
    }
    let config = AnalysisConfig {
        command: "frontier".into(),
        gammas: vec![args.s_rect[1]],
        lambdas: vec![args.s_rect[3]],
        taus: vec![args.tau],
        alpha: args.alpha,
        folds: args.folds,
        eta: args.eta,
        grid_size: args.grid_size,
        design: "observational".into(),
        method: args.method.clone(),
        seed: args.io.seed,
    };
    config.validate()?;
    let rect = SensitivityRect::new(args.s_rect[1], args.s_rect[3])?;
    let mesh = (args.mesh[0], args.mesh[1]);
    let nodes = rect.mesh_points(mesh)?;
    let input = load_input(
        &args.data,
        args.grid_size,
        args.folds,
        args.eta,
        &DesignMode::Observational,
    )?;

    let (frontier, confidence, critical) = match &input.data {
        None => {
            // Population nuisances: plug-in scan only, no resampling.
            let proc = marginal_cdf_bounds(&input.nuisances, &nodes)?;
            let frontier = frontier_scan(&proc, args.tau, &rect, mesh)?;
            (frontier, None, None)
        }
        Some(data) => {
            let proc = one_step_process(data, &input.nuisances, &nodes)?;
            let frontier = frontier_scan(&proc, args.tau, &rect, mesh)?;
            let d = match args.method.as_str() {
                "multiplier" => {
                    let fit = one_step_estimate(data, &input.nuisances, &nodes)?;
                    kappa_multiplier_critical(
                        &fit.process,
                        &fit.phi,
                        args.tau,
                        args.alpha,
                        args.draws,
                        2.0 * input.nuisances.grid().spacing(),
                        args.io.seed,
                    )?
                }
                method => {
                    let exponent: f64 = method
                        .strip_prefix("subsample:")
                        .and_then(|e| e.parse().ok())
                        .ok_or_else(|| {
                            CliError::Config(format!(
                                "method must be 'multiplier' or 'subsample:<exponent>', got '{method}'"
                            ))
                        })?;
                    let m = (data.n() as f64).powf(exponent).floor() as usize;
                    let grid = input.nuisances.grid().clone();
                    let folds = args.folds;
                    let eta = args.eta;
                    let pipeline = |sample: &TwoSampleData| {
                        let sample = sample.retain_supported_targets()?;
                        let nuis =
                            estimate_nuisances(&sample, &grid, folds, eta, &DesignMode::Observational)?;
                        let proc = one_step_process(&sample, &nuis, &nodes)?;
                        Ok(frontier_scan(&proc, args.tau, &rect, mesh)
                            .expect("mesh matches")
                            .kappa)
                    };
                    subsample_critical(
                        data,
                        &pipeline,
                        &frontier.kappa,
                        m,
                        args.draws,
                        args.alpha,
                        args.io.seed,
                    )?
                }
            };
            let conf = frontier_confidence(&frontier, d, data.n());
            (frontier, Some(conf), Some(d))
        }
    };

    ensure_dir(&args.io.out)?;
    write_frontier_csv(&args.io.out.join("frontier_grid.csv"), &frontier, confidence.as_ref())?;
    let zero = match &confidence {
        Some(c) => c.zero_level.clone(),
        None => zero_level_nodes(&frontier, 0.0),
    };
    write_json(&args.io.out.join("zero_level.json"), &zero)?;
    let mut bundle = ResultBundle::new(config);
    bundle.warnings = input.warnings;
    bundle.critical_value = critical;
    bundle.frontier = Some(frontier);
    bundle.frontier_confidence = confidence;
    let path = bundle.write(&args.io.out)?;
    println!(
        "frontier: {}x{} mesh, critical {:?} -> {}",
        mesh.0,
        mesh.1,
        bundle.critical_value,
        path.display()
    );
    Ok(())
}

//! Argument definitions for the `qtb` subcommands.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "qtb",
    about = "Sharp transported-QTE bounds under joint internal/external sensitivity",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plug-in CDF bound process and QTE interval hulls from nuisance JSON
    /// or raw CSV data.
    Bounds(BoundsArgs),
    /// Cross-fitted one-step estimation: psi-hat grid and the per-observation
    /// influence matrix.
    Estimate(EstimateArgs),
    /// Finite-support LP audit of the closed-form envelopes.
    Audit(AuditArgs),
    /// Replication studies on the built-in experiment DGPs.
    Simulate(SimulateArgs),
    /// Breakdown-frontier scan with inner/outer confidence sets.
    Frontier(FrontierArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = "qtb-out")]
    pub out: PathBuf,
    /// Root seed; every random draw derives from it.
    #[arg(long, default_value_t = 202_408)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with columns r, a, y and covariates (names configurable via
    /// --schema).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON schema file describing column names and discretization.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Nuisance JSON file (population-style input, alternative to --input).
    #[arg(long)]
    pub nuisances: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Sensitivity gamma values (comma-separated list).
    #[arg(long, value_delimiter = ',', default_value = "2.0")]
    pub gamma: Vec<f64>,
    /// Sensitivity lambda values, paired with the gamma list (recycled if a
    /// single value is given).
    #[arg(long, value_delimiter = ',', default_value = "1.5")]
    pub lambda: Vec<f64>,
    /// Quantile levels for the interval hulls.
    #[arg(long = "tau-list", value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub tau_list: Vec<f64>,
    /// Threshold grid size when reading raw CSV data.
    #[arg(long = "grid-size", default_value_t = 121)]
    pub grid_size: usize,
    /// Cross-fitting folds for raw-CSV nuisance estimation.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Propensity truncation.
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "2.0")]
    pub gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.5")]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    /// Treatment design: "observational" or "known:PATH" with a JSON array
    /// of per-cell arm-1 propensities.
    #[arg(long, default_value = "observational")]
    pub design: String,
    #[arg(long = "grid-size", default_value_t = 121)]
    pub grid_size: usize,
    /// Skip writing the (large) per-observation influence matrix.
    #[arg(long)]
    pub no_phi: bool,
    /// Quantiles for band-inverted QTE confidence intervals.
    #[arg(long = "tau-list", value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub tau_list: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Resampling draws for the simultaneous band critical value.
    #[arg(long, default_value_t = 199)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Number of exact LP audit cells.
    #[arg(long, default_value_t = 500)]
    pub cases: usize,
    /// Outcome support sizes to cycle through.
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,8,12,20")]
    pub supports: Vec<usize>,
    /// Vectorized algebraic non-collapse cases.
    #[arg(long, default_value_t = 20_000)]
    pub algebraic: usize,
    /// Whole-path tilt audits.
    #[arg(long, default_value_t = 1_000)]
    pub paths: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Which experiment to run: 1 (sharpness audit), 2 (regular inference),
    /// or 4 (nonregular frontier).
    #[arg(long)]
    pub experiment: u8,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 100)]
    pub b: usize,
    /// Source sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Paper-scale settings (B=300, 149 draws, frontier for all methods);
    /// multi-hour runtime.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Args)]
pub struct FrontierArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Critical-value method: "multiplier" or "subsample:EXPONENT"
    /// (for example "subsample:0.6").
    #[arg(long, default_value = "subsample:0.6")]
    pub method: String,
    /// Sensitivity rectangle as gamma_min,gamma_max,lambda_min,lambda_max
    /// (minima must be 1).
    #[arg(long = "s-rect", value_delimiter = ',', default_value = "1,4,1,3")]
    pub s_rect: Vec<f64>,
    /// Mesh resolution as n_gamma,n_lambda.
    #[arg(long, value_delimiter = ',', default_value = "31,31")]
    pub mesh: Vec<usize>,
    #[arg(long, default_value_t = 99)]
    pub draws: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long = "grid-size", default_value_t = 181)]
    pub grid_size: usize,
}

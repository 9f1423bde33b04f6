//! `dyncs`: command-line front end for DCS-AMP recovery and experiments.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] dyncs::Error),
    #[error("{0} self-test check(s) failed")]
    Check(usize),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numerical() => 2,
            CliError::Check(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dyncs", version, about = "Dynamic compressive sensing via DCS-AMP")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset and write it to a directory.
    Generate(GenerateArgs),
    /// Run DCS-AMP (optionally with EM) on a dataset.
    Recover(RecoverArgs),
    /// Support-aware Kalman smoother on a dataset with ground truth.
    Sks(OracleArgs),
    /// Support-aware Kalman filter on a dataset with ground truth.
    Skf(OracleArgs),
    /// TNMSE over a grid of undersampling and sparsity ratios.
    PhasePlane(PhasePlaneArgs),
    /// TNMSE over a grid of support and amplitude dynamics.
    Dynamics(DynamicsArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

/// Signal-model flags shared by several subcommands.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Prior activity probability.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Probability that an active coefficient turns off.
    #[arg(long)]
    pub p01: Option<f64>,
    /// Amplitude innovation rate in (0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Stationary amplitude variance.
    #[arg(long, conflicts_with = "rho")]
    pub sigma2: Option<f64>,
    /// Amplitude perturbation variance (alternative to --sigma2).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Real part of the amplitude mean.
    #[arg(long, allow_hyphen_values = true)]
    pub zeta_re: Option<f64>,
    /// Imaginary part of the amplitude mean.
    #[arg(long, allow_hyphen_values = true)]
    pub zeta_im: Option<f64>,
    /// Measurement noise variance.
    #[arg(long)]
    pub sigma_e2: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Coefficients per frame.
    #[arg(long)]
    pub n: Option<usize>,
    /// Measurements per frame.
    #[arg(long)]
    pub m: Option<usize>,
    /// Number of frames.
    #[arg(long)]
    pub t: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Target SNR in dB; sets the noise variance from the realized signal.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    /// Use one operator for every frame.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub time_invariant: Option<bool>,
    /// Random seed (falls back to DYNCS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Filter,
    Smooth,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmInitArg {
    /// Data-driven initialization.
    Heuristic,
    /// Start from the parameters stored with the dataset.
    Dataset,
}

/// DCS-AMP solver flags.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct SolverFlags {
    /// Forward/backward passes in smoothing mode.
    #[arg(long)]
    pub passes: Option<usize>,
    /// AMP iterations per frame visit.
    #[arg(long)]
    pub inner_iters: Option<usize>,
    /// AMP stopping tolerance on the mean change per coefficient.
    #[arg(long)]
    pub stop_tol: Option<f64>,
    /// Collapse scale for the outgoing support message.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Collapse threshold for the outgoing support message.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Use the expansion collapse when p01 is below this value.
    #[arg(long)]
    pub taylor_switch: Option<f64>,
    /// Damping factor in (0, 1] for the AMP updates.
    #[arg(long)]
    pub damping: Option<f64>,
    /// Start each frame visit from the previous AMP state.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub warm_start: Option<bool>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct RecoverArgs {
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Causal filtering or forward/backward smoothing (default smooth).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverFlags,
    /// Learn the model parameters by expectation-maximization.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub em: Option<bool>,
    /// Maximum EM iterations.
    #[arg(long)]
    pub em_iters: Option<usize>,
    /// EM relative-change tolerance.
    #[arg(long)]
    pub em_tol: Option<f64>,
    /// EM starting point.
    #[arg(long, value_enum)]
    pub em_init: Option<EmInitArg>,
    /// Frames processed before filter-mode EM starts updating.
    #[arg(long)]
    pub em_warmup: Option<usize>,
    /// Model parameters; each flag overrides the dataset value.
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Output directory for the estimates and summary.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SksMethod {
    /// Gaussian belief propagation (means and variances).
    Bp,
    /// Conjugate gradients on the joint normal equations (means only).
    Cg,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct OracleArgs {
    /// Dataset directory; must contain ground truth.
    pub data: Option<PathBuf>,
    /// Maximum message-passing sweeps.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Stop once no posterior mean moves by more than this.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Smoother algorithm.
    #[arg(long, value_enum)]
    pub method: Option<SksMethod>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Output directory for the estimates.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Json,
}

/// Flags shared by the experiment suites.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct SuiteFlags {
    /// Coefficients per frame.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of frames.
    #[arg(long)]
    pub t: Option<usize>,
    /// Trials per grid cell.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Target SNR in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    /// Stationary amplitude variance.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Algorithms to run: sks, dcs-amp, em-dcs-amp, bg-amp.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    /// Random seed (falls back to DYNCS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for trials (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Maximum EM iterations for em-dcs-amp.
    #[arg(long)]
    pub em_iters: Option<usize>,
    /// Output format (default csv).
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Leave the runtime column empty so output is reproducible byte for byte.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub no_timing: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverFlags,
    /// Output file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct PhasePlaneArgs {
    /// Undersampling ratios M/N.
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    /// Sparsity ratios E[K]/M.
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    /// Support turn-off probability.
    #[arg(long)]
    pub p01: Option<f64>,
    /// Amplitude innovation rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub suite: SuiteFlags,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct DynamicsArgs {
    /// Support turn-off probabilities.
    #[arg(long, value_delimiter = ',')]
    pub p01: Option<Vec<f64>>,
    /// Amplitude innovation rates.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    /// Undersampling ratio M/N.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Sparsity ratio E[K]/M.
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub suite: SuiteFlags,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
pub struct SelftestArgs {
    /// Random seed (falls back to DYNCS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file supplying any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Recover(a) => commands::recover(&a),
        Command::Sks(a) => commands::oracle(&a, true),
        Command::Skf(a) => commands::oracle(&a, false),
        Command::PhasePlane(a) => commands::phase_plane(&a),
        Command::Dynamics(a) => commands::dynamics(&a),
        Command::Selftest(a) => selftest::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

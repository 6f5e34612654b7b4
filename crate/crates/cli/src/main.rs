//! `cpd-crib`: Cramér-Rao induced bounds for CP decompositions from the shell.

mod commands;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpd_crib::CribError;

use output::Format;

const THREADS_VAR: &str = "CPD_CRIB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cpd-crib", version, about = "Cramér-Rao induced bounds for CP tensor decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Write the report here instead of stdout.
    #[arg(short, long, global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,

    /// Omit the timestamp so identical runs give identical bytes.
    #[arg(long, global = true)]
    pub reproducible: bool,

    /// Print timing and diagnostics on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// CRIB of one or all factor columns of a model.
    Crib(CribArgs),
    /// Evaluate a closed-form CRIB expression.
    ClosedForm(ClosedFormArgs),
    /// Fit a CP model to a tensor and report CRIBs at the estimate.
    Decompose(DecomposeArgs),
    /// Monte Carlo comparison of angular errors with the CRIB.
    Mc(McArgs),
    /// Accuracy lost by merging modes before decomposing.
    ReshapeLoss(ReshapeArgs),
    /// Upper bound on the rank with a finite CRIB.
    StableRank(StableRankArgs),
    /// Generate a random normalized Kruskal model.
    Gen(GenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Auto,
    Oracle,
    General,
    Fast,
    EpsilonLimit,
}

impl From<MethodArg> for cpd_crib::Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => Self::Auto,
            MethodArg::Oracle => Self::Oracle,
            MethodArg::General => Self::General,
            MethodArg::Fast => Self::Fast,
            MethodArg::EpsilonLimit => Self::EpsilonLimit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Gn,
    Als,
}

#[derive(Debug, Args)]
pub struct CribArgs {
    /// Kruskal model JSON.
    #[arg(long, value_name = "PATH")]
    pub factors: PathBuf,
    /// Noise variance per entry.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Mode and column, 1-based.
    #[arg(long, value_name = "N:R", default_value = "1:1", value_parser = parse_target, conflicts_with = "all")]
    pub target: (usize, usize),
    /// Report every column of every mode.
    #[arg(long)]
    pub all: bool,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    /// Gram regularization used by the auto and ε-limit methods.
    #[arg(long, default_value_t = cpd_crib::crib::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// 0/1 tensor JSON of observed entries.
    #[arg(long, value_name = "PATH")]
    pub mask: Option<PathBuf>,
    /// Write the full Hessian as CSV.
    #[arg(long, value_name = "PATH")]
    pub dump_hessian: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaseArg {
    Rank1,
    Rank2,
    Ortho,
    Brie,
}

#[derive(Debug, Args)]
pub struct ClosedFormArgs {
    #[arg(long, value_enum)]
    pub case: CaseArg,
    /// Parameters as a JSON object, or `@path` to read them from a file.
    #[arg(long)]
    pub params: String,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Dense tensor JSON.
    #[arg(long, value_name = "PATH")]
    pub tensor: PathBuf,
    /// Number of rank-one components.
    #[arg(long)]
    pub rank: usize,
    /// 0/1 tensor JSON of observed entries.
    #[arg(long, value_name = "PATH")]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AlgoArg::Gn)]
    pub algo: AlgoArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Random starts; the best fit is kept.
    #[arg(long, default_value_t = 3)]
    pub starts: usize,
    /// Stop when the relative residual changes by less than this.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Start from this Kruskal model instead of random factors.
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Ground-truth model; adds angular errors of the aligned estimate.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Also write the fitted model as Kruskal JSON.
    #[arg(long, value_name = "PATH")]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Ground-truth Kruskal model JSON.
    #[arg(long, value_name = "PATH")]
    pub factors: PathBuf,
    /// Noise variance per entry.
    #[arg(long, required_unless_present = "snr_db", conflicts_with = "snr_db")]
    pub sigma2: Option<f64>,
    /// Noise level as signal-to-noise ratio per entry.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Missing fractions to sweep, e.g. `0,0.3,0.5`.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub missing: Vec<f64>,
    #[arg(long, value_enum, default_value_t = AlgoArg::Gn)]
    pub algo: AlgoArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Start every fit from random factors instead of the truth.
    #[arg(long)]
    pub random_init: bool,
}

#[derive(Debug, Args)]
pub struct ReshapeArgs {
    /// Kruskal model JSON.
    #[arg(long, value_name = "PATH", required_unless_present = "c", conflicts_with_all = ["c", "i1"])]
    pub factors: Option<PathBuf>,
    /// Rank-2 correlations c₁,…,c_N (c₁ within mode 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "i1")]
    pub c: Option<Vec<f64>>,
    /// Length of the first mode for `--c`.
    #[arg(long)]
    pub i1: Option<usize>,
    /// Modes to merge, 1-based, mode 1 excluded.
    #[arg(long, value_delimiter = ',', required = true)]
    pub merge: Vec<usize>,
    /// Noise variance per entry.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct StableRankArgs {
    /// Tensor dimensions, e.g. `3,3,3`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    /// Check finiteness of random models at the bound and one above.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed of the verification draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Tensor dimensions, e.g. `5,4,4,4`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    /// Number of rank-one components.
    #[arg(long)]
    pub rank: usize,
    /// Target correlation between distinct columns, one per mode.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub correlations: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_target(s: &str) -> Result<(usize, usize), String> {
    let (n, r) = s.split_once(':').ok_or("expected N:R, e.g. 1:1")?;
    let n: usize = n.trim().parse().map_err(|e| format!("mode: {e}"))?;
    let r: usize = r.trim().parse().map_err(|e| format!("column: {e}"))?;
    if n == 0 || r == 0 {
        return Err("mode and column are 1-based".into());
    }
    Ok((n, r))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Crib(CribError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Crib(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
            CliError::Crib(e) => write!(f, "{e}"),
        }
    }
}

impl From<CribError> for CliError {
    fn from(e: CribError) -> Self {
        CliError::Crib(e)
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("{THREADS_VAR}: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let start = Instant::now();
    let result = configure_threads().and_then(|()| commands::run(&cli));
    if cli.verbose > 0 {
        eprintln!("finished in {:.3} s on {} threads", start.elapsed().as_secs_f64(), rayon::current_num_threads());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recsub_core::ErrorKind;

mod commands;
mod config;

/// Recurrent-event hazard regression on subsampled sensor histories.
#[derive(Debug, Parser)]
#[command(name = "recsub", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RECSUB_GIT_DESCRIBE"), ")"))]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate user-days and write a dataset directory.
    Simulate(SimulateArgs),
    /// Fit the hazard model to a dataset or an exported design.
    Fit(FitArgs),
    /// Run a simulation study and write its tables.
    Replicate(ReplicateArgs),
    /// Recompute study metrics from saved curves.
    Eval(EvalArgs),
    /// Summarize missingness and the imputation model of a dataset.
    ImputeDiagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of user-days.
    #[arg(long)]
    pub days: Option<usize>,
    /// MCAR probability for sensor values.
    #[arg(long)]
    pub missing_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long, conflicts_with = "design", required_unless_present = "design")]
    pub data: Option<PathBuf>,
    /// Directory holding `design.csv` and `layout.json` from an earlier fit.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Window length in minutes.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Also fit the random-effects model.
    #[arg(long, requires = "data")]
    pub multilevel: bool,
    /// Impute missing sensor values and pool with bootstrap-then-impute.
    #[arg(long, requires = "data")]
    pub impute: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    /// table1, table2-sine, table2-exp, table3 or appendixC.
    #[arg(long, required_unless_present = "from_config")]
    pub preset: Option<String>,
    /// Take the study from the `[experiment]` table of the config.
    #[arg(long)]
    pub from_config: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Basis size for `β`.
    #[arg(long)]
    pub k_b: Option<usize>,
    /// Also write every fitted curve to `curves.csv`.
    #[arg(long)]
    pub keep_curves: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `replicate --keep-curves`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Report unnormalized metrics.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Core(recsub_core::Error),
    Config(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

impl From<recsub_core::Error> for CliError {
    fn from(e: recsub_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            },
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, &a),
        Command::Fit(a) => commands::fit(&cfg, &a),
        Command::Replicate(a) => commands::replicate(&cfg, &a),
        Command::Eval(a) => commands::eval(&a),
        Command::ImputeDiagnose(a) => commands::impute_diagnose(&cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

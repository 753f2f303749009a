//! `dnqs`: train, measure, analyze and cross-check dilated RNN wave functions.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnqs_core::Error;

#[derive(Debug, Parser)]
#[command(name = "dnqs", version, about = "Dilated RNN wave functions: VMC training, correlations and linearized theory")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the wave function by variational Monte Carlo.
    Train {
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Measure connected correlations of a checkpoint and fit a power law.
    Measure {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Kernels, correlation series, singularity report and oracles of the
    /// linearized model.
    Theory,
    /// Exact ground energy by diagonalization (N ≤ 16).
    Exact {
        /// Benchmark name; overrides the config.
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        field: Option<f64>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// A required input file does not exist.
    Missing(PathBuf),
    Config(String),
    Core(Error),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn read(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io(path.to_path_buf(), e)
        }
    }

    pub fn write(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Core(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Core(Error::CheckpointVersion { .. }) => 3,
            CliError::Core(Error::Resource(_)) => 4,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Missing(p) => write!(f, "file not found: {}", p.display()),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "I/O error on {}: {e}", p.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot configure {k} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train { resume } => commands::train(&cli.global, resume.as_deref()),
        Command::Measure { checkpoint } => commands::measure(&cli.global, &checkpoint),
        Command::Theory => commands::theory(&cli.global),
        Command::Exact { benchmark, sites, field } => commands::exact(&cli.global, benchmark, sites, field),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

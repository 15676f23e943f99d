//! Batch front end for the whole pipeline: dataset synthesis, proposal
//! training and calibration, staged detector training, hard negative mining,
//! evaluation, and the gradient-check report.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use derotnet_core::CoreError;

/// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        CliError::Numerical(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. }
            | CoreError::NanLoss { .. }
            | CoreError::NormalizationDegenerate => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "derotnet",
    about = "rotation-aware detection pipeline",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Proceed despite provenance-hash mismatches.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Train the proposal model and calibrate its thresholds.
    Calibrate,
    /// Write proposals for a dataset split.
    Propose {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Staged detector training.
    Train {
        /// separated, joint or gt-rotation
        #[arg(long, default_value = "joint")]
        mode: String,
    },
    /// Hard negative mining rounds on a trained detector.
    Mine {
        #[arg(long, default_value = "joint")]
        mode: String,
    },
    /// Detection + rotation metrics, PR curve CSV and SVG.
    Eval {
        #[arg(long, default_value = "joint")]
        mode: String,
        /// Evaluate the post-mining checkpoint instead of the base one.
        #[arg(long)]
        mined: bool,
    },
    /// Finite-difference check of every registered operation.
    Gradcheck,
}

fn main() -> ExitCode {
    // single knob for internal parallelism; everything currently runs on one
    // thread, but a malformed value is still a usage error
    if let Ok(v) = std::env::var("DEROTNET_THREADS") {
        if v.parse::<usize>().map(|n| n == 0).unwrap_or(true) {
            eprintln!("error: DEROTNET_THREADS must be a positive integer, got {v:?}");
            return ExitCode::from(1);
        }
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rendering but normalize the exit code contract
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return ExitCode::from(if is_help { 0 } else { 1 });
        }
    };

    let result = (|| -> Result<(), CliError> {
        let config = config::RunConfig::load(cli.config.as_deref(), cli.seed)?;
        let ctx = commands::Context::new(config, cli.out.clone(), cli.force)?;
        match &cli.command {
            Command::Synth => commands::synth(&ctx),
            Command::Calibrate => commands::calibrate(&ctx),
            Command::Propose { split } => commands::propose(&ctx, split),
            Command::Train { mode } => commands::train(&ctx, mode),
            Command::Mine { mode } => commands::mine(&ctx, mode),
            Command::Eval { mode, mined } => commands::eval(&ctx, mode, *mined),
            Command::Gradcheck => commands::gradcheck(&ctx),
        }
    })();

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

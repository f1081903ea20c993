//! Command-line orchestration for data generation, training, evaluation,
//! exploration, threshold search and ablations.

pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// A failure reported as one JSON line on stderr.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<bas::Error> for CliError {
    fn from(e: bas::Error) -> Self {
        let kind = match &e {
            bas::Error::Shape { .. } => "shape",
            bas::Error::InvalidArgument(_) => "invalid_argument",
            bas::Error::Io { .. } => "io",
            bas::Error::Format { .. } => "format",
            bas::Error::NonFiniteLoss { .. } => "non_finite_loss",
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bas", version, about = "Background activation suppression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets both data.seed and train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-key override, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen-data`. Without it the dataset is
    /// generated in memory from `data.*`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Localization and segmentation metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shorthand for `--set eval.k=K`.
        #[arg(long)]
        k: Option<usize>,
        /// Shorthand for `--set eval.theta_box=T`.
        #[arg(long)]
        theta_box: Option<f32>,
        /// Shorthand for `--set eval.deltas=[..]`, comma separated.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Entropy and activation versus eroded / dilated mask area.
    Explore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-image thresholds versus the best global threshold.
    ThresholdSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired runs: without versus with the suppression loss, and legacy
    /// versus default activation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Explore { .. } => "explore",
            Command::ThresholdSearch { .. } => "threshold-search",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// one-line JSON status printed on success.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string().trim().replace('\n', " ")))?;
    commands::dispatch(cli.command)
}

/// Entry point for the binary: prints the status or the error line and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<T> = args.into_iter().collect();
    // help and version go to stdout in clap's own format
    if let Err(e) = Cli::try_parse_from(args.clone()) {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            return 0;
        }
    }
    match run(args) {
        Ok(status) => {
            println!("{status}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            match e.kind {
                "usage" => 2,
                _ => 1,
            }
        }
    }
}

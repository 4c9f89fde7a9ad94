mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] vad_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numerical abort.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(vad_core::Error::InvalidArgument(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// key = value run configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// none, ta, fa, da1 or da2
    #[arg(long, global = true)]
    pub attention: Option<String>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// ce or fl
    #[arg(long, global = true)]
    pub loss: Option<String>,
    /// Focusing parameter for --loss fl
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// epd, nopad, pad1, pad2 or pad3
    #[arg(long, global = true)]
    pub condition: Option<String>,
    /// Comma-separated SNRs in dB
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub snr_set: Option<String>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (or file, for infer)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Manifest CSV; without it, a synthetic corpus is built in memory
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Any other config key, as key=value (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Parser, Debug)]
#[command(name = "vad", version, about = "Attention-augmented LSTM voice activity detection")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic noisy corpus (wav/, labels/, manifest.csv)
    Synth,
    /// Cache log-mel features for every manifest entry
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Energy-based frame labels for clean WAV files
    Label {
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Apply the imbalance condition and noise mixing to a clean corpus
    Prep {
        /// Manifest of clean utterances with labels
        #[arg(long)]
        manifest: PathBuf,
        /// Noise recordings; synthetic noise types are used when absent
        #[arg(long)]
        noise: Vec<PathBuf>,
    },
    /// Train a model; writes config, checkpoint and log under the run dir
    Train,
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-frame speech probabilities for one WAV file
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Last-layer hidden maps before and after refinement for a frame range
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Label file; energy labels of the input are used when absent
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 20)]
        end: usize,
    },
    /// Parameter breakdown for the configured model
    ParamCount,
    /// Train and evaluate over gammas x conditions x {none, da2}
    Sweep,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

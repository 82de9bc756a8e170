//! `bite`: synthesize data, train, evaluate, ablate, sweep and self-check.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use bite_core::BiteError;
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] BiteError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bite", version, about = "EEG decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Mi,
    Ssvep,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate under the configured protocol.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a weight archive on a trial file; prints the report as JSON.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the six ablation configurations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grid over TCN kernel size and dropout.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, default 3,6,9,12.
        #[arg(long)]
        kernels: Option<String>,
        /// Comma-separated, default 0.1,0.2,0.3,0.4,0.5.
        #[arg(long)]
        dropouts: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in verification battery.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic trial file.
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        trials_per_class: Option<usize>,
        #[arg(long)]
        fs: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// SSVEP only: signal-to-noise power ratio.
        #[arg(long)]
        snr: Option<f64>,
        /// SSVEP only: comma-separated class frequencies in Hz.
        #[arg(long)]
        freqs: Option<String>,
        /// MI only.
        #[arg(long)]
        classes: Option<usize>,
        /// MI only: rhythm amplitude factor on the active channel group.
        #[arg(long)]
        boost: Option<f64>,
        /// MI only: background noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("BITE_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("BITE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval { weights, data } => commands::eval(&weights, &data),
        Command::Ablate { config, out, seed } => commands::ablate(&config, &out, seed),
        Command::Sweep { config, kernels, dropouts, out, seed } => {
            commands::sweep(&config, kernels.as_deref(), dropouts.as_deref(), &out, seed)
        }
        Command::Verify { inject_fault } => commands::verify(inject_fault.as_deref()),
        Command::Synth {
            kind,
            out,
            seed,
            subjects,
            trials_per_class,
            fs,
            samples,
            channels,
            snr,
            freqs,
            classes,
            boost,
            noise,
        } => {
            let common = commands::SynthCommon { seed, subjects, trials_per_class, fs, samples, channels };
            match kind {
                Kind::Ssvep => commands::synth_ssvep(&out, common, snr, freqs.as_deref()),
                Kind::Mi => commands::synth_mi(&out, common, classes, boost, noise),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}

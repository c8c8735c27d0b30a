mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coastcast::Error;

#[derive(Parser)]
#[command(name = "coastcast", version, about = "Gridded sea-element forecasting with 3D U-Nets")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic coastal dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train a model; writes best.ckpt and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: String,
        /// Forecast horizon in steps.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test-set MSE per season and variable.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add an MSE column restricted to sea pixels.
        #[arg(long)]
        sea_mse: bool,
        /// Score the validation windows instead of the test windows.
        #[arg(long)]
        validation: bool,
    },
    /// Image dumps of one forecast.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Time of the last input frame (RFC 3339).
        #[arg(long)]
        time: String,
    },
    /// Parameter and layer counts.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// One architecture name, or `all`.
        #[arg(long, default_value = "all")]
        model: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownModel(_) => 2,
        Error::NonFiniteLoss { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.sequential {
        coastcast::exec::set_parallel(false);
    }
    let result = match cli.command {
        Command::Synth {
            common,
            seed,
            steps,
            height,
            width,
        } => commands::synth(&common.config, &common.out, seed, steps, height, width),
        Command::Train {
            common,
            data,
            model,
            horizon,
            seed,
        } => commands::train(&common.config, &common.out, &data, &model, horizon, seed),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            sea_mse,
            validation,
        } => commands::evaluate(&common.config, &common.out, &checkpoint, &data, sea_mse, validation),
        Command::Predict {
            common,
            checkpoint,
            data,
            time,
        } => commands::predict(&common.config, &common.out, &checkpoint, &data, &time),
        Command::Inspect { common, model } => commands::inspect(&common.config, &common.out, &model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

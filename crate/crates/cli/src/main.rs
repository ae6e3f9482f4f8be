mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::GradcheckFailed;
use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dstgcn", version, about = "Traffic forecasting with dynamic spatio-temporal graph convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic regime-switching dataset.
    Generate,
    /// Train on the configured dataset and write a checkpoint.
    Train,
    /// Score a checkpoint on the test split against the baselines.
    Eval,
    /// Forecast from one anchor step.
    Predict,
    /// Finite-difference check of the total loss on a small instance.
    Gradcheck,
    /// Time the factorized layer against a dense joint graph convolution.
    Bench,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut c = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::Generate => commands::generate(&mut c),
        Command::Train => commands::train_cmd(&mut c),
        Command::Eval => commands::eval_cmd(&mut c),
        Command::Predict => commands::predict_cmd(&mut c),
        Command::Gradcheck => commands::gradcheck_cmd(&mut c),
        Command::Bench => commands::bench_cmd(&mut c),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return 2;
    }
    e.chain()
        .find_map(|c| c.downcast_ref::<dstgcn::Error>())
        .map_or(1, |d| d.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

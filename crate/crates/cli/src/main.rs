//! `wavseg`: wavelet edge analysis and edge-guided segmentation at desk
//! scale. Exit codes: 0 success, 1 bad input (arguments, files, config,
//! failed checks), 2 internal error.

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod cmd;
mod config;
mod data;
mod imgio;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn user(msg: String) -> Self {
        Self { code: 1, msg }
    }

    pub fn internal(msg: String) -> Self {
        Self { code: 2, msg }
    }
}

impl From<wavseg::Error> for CliError {
    fn from(e: wavseg::Error) -> Self {
        match e {
            // Autodiff invariants can only break from inside the library.
            wavseg::Error::Autodiff(_) => Self::internal(e.to_string()),
            _ => Self::user(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "wavseg",
    version,
    about = "Wavelet edge analysis and edge-guided segmentation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write an image's two-level wavelet bands and fused edge mask.
    Edges(cmd::EdgesArgs),
    /// Generate a synthetic blob-segmentation dataset.
    Synth(cmd::SynthArgs),
    /// Train a model on a dataset directory.
    Train(cmd::TrainArgs),
    /// Evaluate a checkpoint and write metric reports.
    Eval(cmd::EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(cmd::GradcheckArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Edges(a) => cmd::edges(a),
        Cmd::Synth(a) => cmd::synth(a),
        Cmd::Train(a) => cmd::train(a),
        Cmd::Eval(a) => cmd::eval(a),
        Cmd::Gradcheck(a) => cmd::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

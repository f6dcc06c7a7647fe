//! `postsel` command-line interface.
//!
//! Exit codes: 0 success, 2 config/input error, 3 checkpoint
//! incompatibility, 4 data misalignment. `gradcheck` exits 1 when a
//! gradient comparison fails.

mod commands;
mod config_file;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use postsel_core::Error;

#[derive(Parser)]
#[command(
    name = "postsel",
    version,
    about = "Knowledge-grounded dialogue model with posterior-guided knowledge selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge-copy dataset (train/valid/test).
    GenSynthetic(commands::GenSyntheticArgs),
    /// Train a model and write a run directory.
    Train(Box<commands::TrainArgs>),
    /// Evaluate a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Score generation files without a model.
    Metrics(commands::MetricsArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Interactive REPL over a trained checkpoint.
    Chat(commands::ChatArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Checkpoint(_) => 3,
        Error::Misaligned(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => commands::gen_synthetic(args),
        Command::Train(args) => commands::cmd_train(*args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Metrics(args) => commands::cmd_metrics(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
        Command::Chat(args) => commands::cmd_chat(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

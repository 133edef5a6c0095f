// SPDX-License-Identifier: MIT OR Apache-2.0

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use mamba_lrp::par::Execution;
use mamba_lrp::Error;

use args::{Cli, Command};

/// Exit status for each error family: 2 configuration, 3 I/O or format,
/// 4 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Vocabulary { .. } | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Training { .. } | Error::Shape { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, exec),
        Command::Train(a) => commands::train_cmd(a, exec),
        Command::Explain(a) => commands::explain(a, exec),
        Command::EvalConservation(a) => commands::eval_conservation(a, exec),
        Command::EvalFaithfulness(a) => commands::eval_faithfulness(a, exec),
        Command::Needle(a) => commands::needle(a, exec),
        Command::Ablate(a) => commands::ablate(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

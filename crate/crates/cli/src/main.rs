//! `csi-compress`: generate channel data, train autoencoders, compress them,
//! and measure size, speed and reconstruction quality.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use csi_compress::Error;

use args::{Cli, Command};

/// Exit status for a failed run, by error category.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 2,
        Some(Error::Format { .. } | Error::Shape { .. } | Error::Empty(_)) => 3,
        Some(Error::Invariant(_) | Error::Autodiff(_)) => 4,
        Some(Error::Io(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Compress(a) => commands::compress(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Bench(a) => commands::bench(&cli.global, a),
        Command::Sweep(a) => commands::sweep(&cli.global, a),
        Command::Info(a) => commands::info(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use subface::ErrorKind;

use cli::{Cli, Command};

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SUBFACE_LOG", "warn")).init();
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(e.kind()));
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match &cli.command {
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::SweepRatio(a) => commands::sweep_cmd(a),
        Command::Compactness(a) => commands::compactness_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

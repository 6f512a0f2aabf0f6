use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod config;
mod manifest;
mod viz;

use args::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<csau::Error>() {
            return match e.kind() {
                csau::ErrorKind::Numeric => EXIT_NUMERIC,
                csau::ErrorKind::Data => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<commands::Failure>() {
            return match e {
                commands::Failure::Usage(_) => EXIT_USAGE,
                commands::Failure::Data(_) => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

pub fn run(argv: Vec<OsString>) -> u8 {
    let argv = match config::expand(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match commands::dispatch(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os().collect()))
}

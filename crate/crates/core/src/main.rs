use std::process::ExitCode;

use clap::Parser;
use stpca::cli::{exit_code, run, Cli, EXIT_USAGE};

const THREADS_VAR: &str = "STPCA_THREADS";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        },
        Err(_) => 1,
    };
    stpca::par::init_threads(threads);
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

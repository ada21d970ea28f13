use std::process::ExitCode;

use clap::Parser;
use lesionseg::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("LSEG_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                lesionseg::parallel::init_thread_pool(n);
            }
            _ => {
                eprintln!("error: LSEG_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(lesionseg::cli::EXIT_CONFIG);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

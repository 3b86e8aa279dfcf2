//! `snmt` command-line interface. Exit codes: 0 success, 1 runtime error,
//! 2 usage error.

mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    // clap itself exits with code 2 on usage errors (its default)
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hydroseg::cli::Cli::parse();
    match hydroseg::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Messages already embed their causes.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

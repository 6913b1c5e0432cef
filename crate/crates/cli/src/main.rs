use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match nowcast_cli::run(nowcast_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = aoi_marl_cli::Cli::parse();
    match aoi_marl_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

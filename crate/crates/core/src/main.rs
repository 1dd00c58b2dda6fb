use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    vap::cli::init_logging();
    vap::cli::run(vap::cli::Cli::parse())
}

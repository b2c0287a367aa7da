use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    cap_core::cli::run(cap_core::cli::Cli::parse())
}

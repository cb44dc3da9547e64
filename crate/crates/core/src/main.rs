use std::process::ExitCode;

use clap::Parser;

mod cli;

fn main() -> ExitCode {
    let args = cli::Cli::parse();
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // 2: bad input, 3: numerical failure.
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

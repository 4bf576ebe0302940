use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = avtrack::cli::Cli::parse();
    match avtrack::cli::run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

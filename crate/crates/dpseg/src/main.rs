use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = dpseg::cli::Cli::parse();
    match dpseg::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use minivla_cli::args::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MINIVLA_LOG", "warn")).init();
    let cli = Cli::parse();
    match minivla_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

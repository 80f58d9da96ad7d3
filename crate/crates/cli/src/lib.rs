//! Command-line front end for the minivla runtime.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use args::{Cli, Command, EvalCommand};
use error::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => commands::generate::run(a),
        Command::Profile(a) => commands::profile::run(a),
        Command::CompareActiongen(a) => commands::compare::run(a),
        Command::Eval(EvalCommand::Open(a)) => commands::eval::open(a),
        Command::Eval(EvalCommand::Closed(a)) => commands::eval::closed(a),
        Command::PrintConfig(a) => {
            let cfg = a.resolve()?;
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::invariant(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

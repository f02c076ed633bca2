use std::fmt;
use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod config;

use args::{Cli, Command};

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::BuildPrompts(a) => commands::build_prompts(a),
        Command::Infer(a) => commands::infer(a),
        Command::Decode(a) => commands::decode(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GenSelectorData(a) => commands::gen_selector_data(a),
        Command::Select(a) => commands::select(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::apply(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

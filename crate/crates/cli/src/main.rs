mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use nmt_core::{NmtError, Result};

use crate::args::{Cli, Command};
use crate::config::{Layer, PipelineConfig};

fn run(cli: &Cli, sub: &clap::ArgMatches) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    let layer = Layer { matches: sub };
    match &cli.command {
        Command::Filter(a) => commands::filter(a, &layer, &mut cfg),
        Command::BuildVocab(a) => commands::build_vocab(a, &layer, &mut cfg),
        Command::Train(a) => commands::train(a, &layer, &mut cfg),
        Command::Translate(a) => commands::translate(a, &layer, &mut cfg),
        Command::Evaluate(a) => commands::evaluate(a, &layer, &mut cfg),
    }
}

fn exit_code(e: &NmtError) -> u8 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    match run(&cli, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

mod args;
mod commands;
mod config;
mod exit;
mod output;

use std::process::ExitCode;

use clap::Parser;
use tracing::Level;

use crate::args::Cli;
use crate::commands::Ctx;
use crate::config::CliConfig;
use crate::exit::{classify, ErrorClass};

fn init_tracing(verbose: u8) {
    let level = match verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        2 => Level::DEBUG,
        _ => Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let ctx = Ctx {
        store: cli.store.or_else(|| config.store.clone()),
        format: cli.format.or(config.format).unwrap_or_default(),
        config,
    };
    let out = commands::run(&ctx, cli.command)?;
    ctx.emit(&out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ErrorClass::Usage.code())
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_tracing(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (class, name) = classify(&err);
            eprintln!("error[{}]: {name}: {err:#}", class.as_str());
            ExitCode::from(class.code())
        }
    }
}

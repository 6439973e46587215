//! Driver for `stochmatch` runs: configuration, command registry, run
//! directory and manifest, SVG figures.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::builder::PossibleValuesParser;
use clap::Parser;

use crate::commands::{command, registry, RunContext};
use crate::config::RunConfig;
use crate::output::{hash_file, Manifest, OutputDir};

#[derive(Debug, Parser)]
#[command(name = "stochmatch", version, about = "Stochastic shape matching with string methods")]
#[command(after_help = commands_help())]
pub struct Cli {
    /// Command to run.
    #[arg(value_parser = PossibleValuesParser::new(registry().keys().copied()))]
    pub command: String,
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn commands_help() -> String {
    format!("Commands:\n{}", commands::describe())
}

/// Loads the config, applies the command-line overrides and resolves input
/// paths against the config's directory.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(named) = &cfg.command {
        if named != &cli.command {
            bail!("config is for command '{named}', not '{}'", cli.command);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let base = cli.config.parent().unwrap_or(Path::new("."));
    Ok(cfg.resolved(base))
}

/// Runs one command end to end. The manifest is written last, also when
/// the command fails after creating the output directory (then flagged
/// `partial`).
pub fn execute(cli: &Cli) -> Result<Manifest> {
    let cfg = effective_config(cli)?;
    let cmd = command(&cli.command).expect("clap only admits registered commands");
    let inputs = cmd
        .inputs(&cfg)
        .iter()
        .map(|p| hash_file(p))
        .collect::<Result<Vec<_>>>()?;
    let mut out = OutputDir::create(&cli.out)?;
    let mut ctx = RunContext {
        cfg: &cfg,
        out: &mut out,
        diagnostics: Default::default(),
    };
    let result = cmd.run(&mut ctx);
    let diagnostics = std::mem::take(&mut ctx.diagnostics);
    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs,
        diagnostics,
        files: out.files().to_vec(),
        partial: result.is_err(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
    };
    out.finish(&manifest)?;
    match result {
        Ok(()) => Ok(manifest),
        Err(e) => Err(e.context(format!("{} failed; partial outputs in {}", cli.command, cli.out.display()))),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stochmatch: {e:#}");
            ExitCode::FAILURE
        }
    }
}

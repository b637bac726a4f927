//! `qlswitch` command-line front end.

mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;

use config::{Command, Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qlswitch", version, about = "Switched-system analysis of linear Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    flags: Flags,
}

/// Bad flags or flag combinations (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A run that finished without converging, or diverged (exit code 3).
#[derive(Debug)]
pub struct NotConverged(pub String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NotConverged {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NotConverged>().is_some() {
        return 3;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<qlswitch::Error>() {
        Some(qlswitch::Error::CertificateRefused(_)) => 4,
        Some(qlswitch::Error::IdentityViolated { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg_and_problem = match (&cli.flags.replay, cli.command) {
        (Some(path), cmd) => {
            let cfg = RunConfig::from_output(path)?;
            if cmd.is_some_and(|c| c != cfg.command) {
                anyhow::bail!(Usage(format!(
                    "replayed file was produced by `{:?}`",
                    cfg.command
                )));
            }
            let p = cfg.reload()?;
            (cfg, p)
        }
        (None, None) => anyhow::bail!(Usage("a subcommand is required (try --help)".into())),
        (None, Some(Command::Presets)) => return commands::presets(),
        (None, Some(cmd)) => RunConfig::resolve(cmd, &cli.flags)?,
    };
    let (cfg, p) = cfg_and_problem;
    commands::dispatch(&cfg, &p, cli.flags.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

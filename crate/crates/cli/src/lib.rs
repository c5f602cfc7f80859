//! Command-line surface of the solver: configuration, record emission and
//! one subcommand per experiment.

pub mod config;
pub mod output;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::config::ConfigError;
use crate::run::RunError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNCONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Command {
    Solve,
    SolveEnergy,
    Sweep,
    Rates,
    OmegaC,
    Loop,
    Scan,
    Tf,
    Lambda0,
    Info,
}

impl Command {
    fn name(self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "rnls", about = "Ground states of the rotating defocusing NLS")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.omega=-2`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

/// Configuration text plus overrides, with the experiment taken from the
/// subcommand. A config naming a different experiment is rejected.
pub fn load_config(cli: &Cli) -> Result<config::RunConfig, ConfigError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
    let name = cli.command.name();
    if let Some(kind) = table
        .get("experiment")
        .and_then(|e| e.get("kind"))
        .and_then(|k| k.as_str())
    {
        if kind != name.as_str() {
            return Err(ConfigError(format!(
                "exactly one experiment may be selected: config names '{kind}', command is '{name}'"
            )));
        }
    }
    let mut overrides = vec![format!("experiment.kind={name:?}")];
    overrides.extend(cli.set.iter().cloned());
    config::parse_with_overrides(&text, &overrides)
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var("RNLS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        ConfigError(format!(
            "RNLS_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match configure_threads().and_then(|_| load_config(&parsed)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run::run(&cfg) {
        Ok(out) => {
            println!("{}", out.summary);
            if out.converged {
                EXIT_OK
            } else {
                eprintln!("warning: not every solve reached its tolerances");
                EXIT_UNCONVERGED
            }
        }
        Err(RunError::Config(m)) => {
            eprintln!("error: {m}");
            EXIT_CONFIG
        }
        Err(RunError::Solver(m)) => {
            eprintln!("error: {m}");
            EXIT_UNCONVERGED
        }
    }
}

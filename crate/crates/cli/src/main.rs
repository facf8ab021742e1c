//! `refml` — experiment front end: dataset generation, suite execution, and
//! checkpoint inspection.

mod generate;
mod inspect;
mod run;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use refml_core::config::{parse_override, ExperimentConfig};
use refml_core::{Error, Result};

#[derive(Parser)]
#[command(name = "refml", version, about = "Federated meta-learning simulator for few-shot fault diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set rounds=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides output.dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one window CSV per synthetic condition.
    Generate(ConfigArgs),
    /// Run the configured experiment suite.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Worker threads for suite cells (0 = all cores). Does not change
        /// any output.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Print the resolved config and exit without computing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the contents of a checkpoint file.
    Inspect {
        /// Checkpoint path (.bin).
        path: PathBuf,
    },
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ExperimentConfig::load(&self.config, &overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => generate::cmd_generate(&args.load()?),
        Command::Run { config, jobs, dry_run } => run::cmd_run(&config.load()?, jobs, dry_run),
        Command::Inspect { path } => inspect::cmd_inspect(&path),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = if is_validation(&e) { 1 } else { 2 };
            std::process::exit(code);
        }
    }
}

fn is_validation(e: &Error) -> bool {
    e.is_validation() || matches!(e, Error::CorruptCheckpoint(_))
}

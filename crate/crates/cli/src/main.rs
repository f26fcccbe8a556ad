use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmc_lab::combine::cli_combine;
use lmc_lab::ood::cli_ood;
use lmc_lab::runner::{cli_run, cli_sweep, inspect};
use lmc_lab::{CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "lmc-lab", version, about = "Run, sweep and inspect modular continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to `output.dir`, then $LMC_LAB_DATA.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            jobs: self.jobs,
            seed_offset: self.seed_offset,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one learner on its stream.
    Run(Common),
    /// One run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Train on the grid diagonal, score all 25 class/colour cells.
    Ood(Common),
    /// Union of two saved runs, evaluated without training.
    Combine {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a saved run.
    Inspect { dir: PathBuf },
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let load = |c: &Common| ExperimentConfig::load(&c.config).map_err(CliError::from);
    match cli.command {
        Command::Run(c) => Ok(cli_run(&load(&c)?, &c.options())?.text),
        Command::Sweep { common, param, values } => Ok(cli_sweep(&load(&common)?, &param, &values, &common.options())?.text),
        Command::Ood(c) => Ok(cli_ood(&load(&c)?, &c.options())?.text),
        Command::Combine { a, b, out } => Ok(cli_combine(&a, &b, &out)?.text),
        Command::Inspect { dir } => inspect(&dir),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lmc-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

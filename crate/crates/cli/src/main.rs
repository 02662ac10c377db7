//! `opcast`: generate synthetic data, train, evaluate and compare runs.

mod report;
mod run;

use clap::{Parser, Subcommand, ValueEnum};
use opcast::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "opcast",
    version,
    about = "Neural-operator forecasting on spatio-temporal fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured PDE and write a dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained run directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Transductive)]
        mode: Mode,
        /// Unseen-node ratio (inductive) or missing-frame ratio (irregular).
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Tabulate the metrics of one or more run directories.
    Report {
        /// Run directories to compare.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML config; defaults are used when absent (eval reads the run's snapshot).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; relative paths resolve against $RUN_DIR when set.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Root seed override. For eval it only reseeds frame masking.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Transductive,
    Inductive,
    Irregular,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Transductive => "transductive",
            Mode::Inductive => "inductive",
            Mode::Irregular => "irregular",
        }
    }
}

fn resolve(dir: PathBuf) -> PathBuf {
    match std::env::var_os("RUN_DIR") {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => run::generate(common.config.as_deref(), &resolve(common.run_dir), common.seed),
        Command::Train { common } => run::train(common.config.as_deref(), &resolve(common.run_dir), common.seed),
        Command::Eval { common, mode, ratio } => run::eval(
            common.config.as_deref(),
            &resolve(common.run_dir),
            common.seed,
            mode,
            ratio,
        ),
        Command::Report { runs, run_dir } => {
            let runs: Vec<PathBuf> = runs.into_iter().map(resolve).collect();
            report::report(&runs, run_dir.map(resolve).as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

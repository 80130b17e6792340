use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gap_core::Result;

mod commands;
mod config;
mod plot;

use config::{Overrides, RunConfig};

/// Grounding-based attention priors on a synthetic shape world.
#[derive(Parser)]
#[command(name = "gap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run name; outputs go to `<runs_dir>/<name>/`.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                name: self.name.clone(),
                seed: self.seed,
                runs_dir: self.runs_dir.clone(),
                set: self.set.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val scenes and questions.
    Gen(Common),
    /// Train the unsupervised phrase grounder.
    TrainGround(Common),
    /// Write per-instance attention priors.
    ExportPriors(Common),
    /// Stage 1: fit attention to the priors.
    Pretrain(Common),
    /// Stage 2: answer-supervised training.
    Finetune(Common),
    /// Evaluate the fine-tuned model on the val split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate without refinement.
        #[arg(long)]
        no_prior: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Baseline and GAP accuracy across supervision fractions and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Check closed-form refinement against the numeric minimizers.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Render the sweep curves as SVG.
    Plot(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => commands::gen(&c.load()?),
        Command::TrainGround(c) => commands::train_ground(&c.load()?),
        Command::ExportPriors(c) => commands::export_priors(&c.load()?),
        Command::Pretrain(c) => commands::pretrain(&c.load()?),
        Command::Finetune(c) => commands::finetune(&c.load()?),
        Command::Eval {
            common,
            no_prior,
            checkpoint,
        } => commands::eval(&common.load()?, no_prior, checkpoint.as_deref()).map(drop),
        Command::Sweep { common, fractions } => commands::sweep(&common.load()?, fractions.as_deref()).map(drop),
        Command::Verify { common, cases } => commands::verify(&common.load()?, cases),
        Command::Plot(c) => commands::plot(&c.load()?).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

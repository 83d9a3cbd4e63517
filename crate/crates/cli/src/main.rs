//! `beamtrain`: dataset generation, beam search, training, evaluation and
//! complexity accounting from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use beamtrain_core::search::DEFAULT_BUDGET;
use beamtrain_core::Result;

use commands::{out_path, Algorithm, SplitArg};
use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "beamtrain", version, about = "Beam training for RIS-assisted THz multi-user MIMO")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key=value configuration file with optional [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set system.k=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "BEAMTRAIN_THREADS")]
    threads: Option<usize>,
    /// Largest number of candidates an exhaustive search may visit.
    #[arg(long, global = true, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw channels, label them and write a dataset file.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a beam search on every channel of a dataset or on freshly drawn channels.
    Search {
        #[arg(long, value_enum)]
        algorithm: Algorithm,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the multi-task classifier.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss and accuracy CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Accuracy and per-sample sum rates of a trained model.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        /// Also run exhaustive search on every sample.
        #[arg(long)]
        es: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiplication counts of ES, IAS and the network over RIS sizes.
    Complexity {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        m: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Alternating optimization of a random blockwise problem.
    BlockwiseDemo {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(beamtrain_core::Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| beamtrain_core::Error::Config(format!("thread pool: {e}")))?;
    }
    let st = Settings::resolve(c.config.as_deref(), &c.overrides)?;
    match &cli.command {
        Command::GenDataset { out } => commands::gen_dataset(&st, c.seed, c.budget, out),
        Command::Search {
            algorithm,
            dataset,
            out,
        } => commands::search(&st, c.seed, c.budget, dataset.as_deref(), *algorithm, out_path(out)),
        Command::Train { dataset, out, report } => {
            commands::train_cmd(&st, c.seed, dataset, out, report.as_deref())
        }
        Command::Eval {
            dataset,
            checkpoint,
            split,
            es,
            out,
        } => commands::eval(dataset, checkpoint, *split, es.then_some(c.budget), out_path(out)),
        Command::Complexity { m, out } => commands::complexity(&st, m, out_path(out)),
        Command::BlockwiseDemo { out } => commands::blockwise_demo(&st, c.seed, out_path(out)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

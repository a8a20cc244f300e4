//! Command-line front end: each subcommand is one reproducible experiment
//! step or sweep, driven by a config file plus a handful of overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmim::cli::{self, ExperimentConfig, Through};
use fedmim::Error;

#[derive(Parser)]
#[command(
    name = "fedmim",
    version,
    about = "Federated masked-image pretraining, end to end on one machine"
)]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the config's float width.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["32", "64"]))]
    precision: Option<String>,

    /// Worker threads for the round loop; affects speed only, never results.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the training data across clients and chart the result.
    Partition,
    /// Partition, then run self-supervised pretraining.
    Pretrain,
    /// Partition, pretrain if configured, then fine-tune a classifier.
    Finetune,
    /// Run all stages and score the classifier on the test split.
    Evaluate {
        /// Score this checkpoint directly instead of training.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Finite-difference every graph primitive and the full training losses.
    Gradcheck,
    /// Sweep the hidden-patch ratio; one accuracy table over the grid.
    AblateMask,
    /// Sweep pretraining budgets against compute-matched scratch baselines.
    AblateRounds,
    /// FedAvg vs FedProx vs semi-supervised vs scratch on one split.
    Compare,
}

fn main() -> ExitCode {
    // FMIM_LOG={error,info,debug}; progress lands on stderr.
    env_logger::Builder::new()
        .parse_filters(&std::env::var("FMIM_LOG").unwrap_or_else(|_| "info".into()))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(diags)) => {
            eprintln!("error: the config did not validate:");
            for d in diags {
                eprintln!("  {d}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::contract("this subcommand needs --config PATH"))?;
    let mut cfg = cli::load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    if let Some(p) = &cli.precision {
        cfg.run.precision = p.parse().expect("clap restricts the values");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Partition => {
            cli::run_pipeline(&load(&cli)?, Through::Partition, None)?;
        }
        Cmd::Pretrain => {
            cli::run_pipeline(&load(&cli)?, Through::Pretrain, None)?;
        }
        Cmd::Finetune => {
            cli::run_pipeline(&load(&cli)?, Through::Finetune, None)?;
        }
        Cmd::Evaluate { init } => {
            let summary = cli::run_pipeline(&load(&cli)?, Through::Evaluate, init.as_deref())?;
            match (summary.accuracy, summary.f1_macro) {
                (Some(acc), Some(f1)) => println!("accuracy {acc:.4}  macro-F1 {f1:.4}"),
                _ => println!("no classifier was trained; nothing to score"),
            }
        }
        Cmd::Gradcheck => {
            let entries = cli::gradient_suite::<f64>()?;
            let mut worst: f64 = 0.0;
            for e in &entries {
                println!("{:<22} {}", e.name, e.report);
                worst = worst.max(e.report.max_rel_err);
            }
            println!("worst relative error {worst:.3e} across {} checks", entries.len());
            if worst >= 1e-4 {
                return Err(Error::contract(
                    "a gradient check exceeded the 1e-4 relative-error budget",
                ));
            }
        }
        Cmd::AblateMask => {
            let table = cli::ablate_mask(&load(&cli)?)?;
            println!("wrote {}", table.display());
        }
        Cmd::AblateRounds => {
            let table = cli::ablate_rounds(&load(&cli)?)?;
            println!("wrote {}", table.display());
        }
        Cmd::Compare => {
            let table = cli::compare(&load(&cli)?)?;
            println!("wrote {}", table.display());
        }
    }
    Ok(())
}

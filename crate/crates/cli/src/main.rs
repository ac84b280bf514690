//! `ircan`: attribution, neuron selection, reweighting and evaluation from
//! the command line. Every command writes a `<output>.manifest.json` before
//! its results.

mod commands;
mod config_file;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "ircan", version, about = "Context-aware neuron attribution and reweighting")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores); IRCAN_THREADS overrides.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key = value` file of flags for the subcommand; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config_file: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic knowledge-conflict benchmark.
    GenData(GenDataArgs),
    /// Train a toy model on a line corpus.
    Train(TrainArgs),
    /// Attribution scores for every example and neuron.
    Attribute(AttributeArgs),
    /// Select context-aware neurons from attribution scores.
    Identify(IdentifyArgs),
    /// Reweight or erase neurons and save the edited checkpoint.
    Edit(EditArgs),
    /// Score a dataset (ACC and SR).
    Eval(EvalArgs),
    /// Search h and beta on validation, report on test.
    Grid(GridArgs),
    /// Compare erase and random-neuron interventions with the selected neurons.
    Ablate(AblateArgs),
    /// Overlap of the top-k neurons from two score files.
    Overlap(OverlapArgs),
    /// Compare model logits with a reference-logits file.
    Parity(ParityArgs),
}

fn threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var("IRCAN_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("IRCAN_THREADS must be a positive integer, got {v:?}"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = threads(cli.threads)? {
        anyhow::ensure!(n > 0, "thread count must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Attribute(a) => attribute(a, seed),
        Command::Identify(a) => identify(a, seed),
        Command::Edit(a) => edit(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Grid(a) => grid(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::Overlap(a) => overlap(a, seed),
        Command::Parity(a) => parity(a, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headsparse::engine::SelectorMode;

use crate::config::{RunConfig, DEFAULT_OUT, OUT_ENV};

/// Head-wise sparse attention experiments on synthetic workloads.
///
/// Settings resolve as: command-line flag, then the config file, then the
/// HEADSPARSE_OUT environment variable (output directory only), then the
/// built-in default.
#[derive(Debug, Parser)]
#[command(name = "headsparse", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every head on a needle sequence and write the head partition.
    Calibrate {
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train one low-rank projector per retrieval head.
    TrainIndexer {
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Prefill, decode with the sparse engine and write traces and reports.
    Run {
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Directory holding trained projectors.
        #[arg(long)]
        projectors: Option<PathBuf>,
        /// Use the content-coordinate projector instead of trained ones.
        #[arg(long)]
        content_projector: bool,
        #[arg(long)]
        mode: Option<SelectorMode>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Toy self-distillation against cached dense-teacher logits.
    DistillToy {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Time dense and sparse decode steps.
    Bench {
        /// Comma-separated cache lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Validate and summarise the artifacts in the output directory.
    Report,
}

fn resolve(global: &GlobalArgs) -> Result<(RunConfig, PathBuf), commands::CliError> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    let out = global
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    config.output_dir = Some(out.clone());
    Ok((config, out))
}

fn dispatch(cli: Cli) -> Result<(), commands::CliError> {
    let (mut config, out) = resolve(&cli.global)?;
    match cli.command {
        Command::Calibrate { ratio } => {
            if let Some(r) = ratio {
                config.geometry.retrieval_ratio = r;
            }
            commands::calibrate(&config, &out)
        }
        Command::TrainIndexer {
            partition,
            steps,
            lr,
            rank,
        } => {
            if let Some(s) = steps {
                config.stage1.steps = s;
            }
            if let Some(l) = lr {
                config.stage1.lr = l;
            }
            if let Some(r) = rank {
                config.stage1.rank = r;
            }
            commands::train_indexer(&config, &out, partition)
        }
        Command::Run {
            partition,
            projectors,
            content_projector,
            mode,
            p,
        } => {
            if let Some(m) = mode {
                config.decode.mode = m;
            }
            if let Some(p) = p {
                config.geometry.top_p = p;
            }
            if content_projector {
                config.indexer.source = config::ProjectorSource::Content;
            }
            commands::run(&config, &out, partition, projectors)
        }
        Command::DistillToy { steps, lr } => {
            if let Some(s) = steps {
                config.distill.stage2.steps = s;
            }
            if let Some(l) = lr {
                config.distill.stage2.lr = l;
            }
            commands::distill_toy(&config, &out)
        }
        Command::Bench {
            lengths,
            iterations,
            warmup,
        } => {
            if let Some(l) = lengths {
                config.bench.lengths = l;
            }
            if let Some(i) = iterations {
                config.bench.iterations = i;
            }
            if let Some(w) = warmup {
                config.bench.warmup = w;
            }
            commands::bench(&config, &out)
        }
        Command::Report => commands::report(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

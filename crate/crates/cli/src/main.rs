//! `knnlab` experiment driver.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(name = "knnlab", version, about = "kNN-augmented language model experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads (1 = deterministic reference mode, 0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Interpolation weight on the retrieval distribution.
    #[arg(long, global = true, value_name = "F")]
    lambda: Option<f64>,

    /// Temperature of the retrieval softmax.
    #[arg(long, global = true, value_name = "F")]
    tau: Option<f64>,

    /// Number of neighbors retrieved per query.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,

    /// greedy, ancestral, top_k, nucleus or beam.
    #[arg(long, global = true, value_name = "NAME")]
    strategy: Option<String>,

    #[arg(long, global = true, value_name = "F")]
    p: Option<f64>,

    #[arg(long, global = true, value_name = "N")]
    topk: Option<usize>,

    #[arg(long, global = true, value_name = "N")]
    beam: Option<usize>,

    /// Use (and for build-datastore, build) the approximate index.
    #[arg(long, global = true, overrides_with = "no_index")]
    index: bool,

    #[arg(long, global = true, overrides_with = "index")]
    no_index: bool,

    /// baseline, retrieval or both.
    #[arg(long, global = true, value_name = "MODE")]
    mode: Option<String>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            threads: self.threads,
            seed: self.seed,
            lambda: self.lambda,
            tau: self.tau,
            k: self.k,
            strategy: self.strategy.clone(),
            p: self.p,
            topk: self.topk,
            beam: self.beam,
            index: match (self.index, self.no_index) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            mode: self.mode.clone(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference language model.
    Train,
    /// Build the datastore (and optionally the approximate index).
    BuildDatastore,
    /// Generate continuations for held-out prefixes.
    Generate,
    /// Score a generations file.
    Evaluate,
    /// Win-rate, bucket and trajectory diagnostics.
    Diagnose,
    /// Write a synthetic train/valid/test corpus.
    SynthCorpus {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Approximate total token count.
        #[arg(long, default_value_t = 1_100_000)]
        tokens: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::SynthCorpus { out, tokens } = &cli.command {
        return commands::synth_corpus(out, *tokens, cli.global.seed.unwrap_or(17));
    }
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()?;
    pool.install(|| match cli.command {
        Command::Train => commands::train(&cfg),
        Command::BuildDatastore => commands::build_datastore(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Diagnose => commands::diagnose(&cfg),
        Command::SynthCorpus { .. } => unreachable!(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! `mdda`: train, run, score and measure the restoration network.
//!
//! Exit status is 0 on success, 1 for bad arguments or configuration and 2
//! when a command fails while running.

mod bench;
mod config;
mod images;
mod make_data;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// An error in how the program was invoked rather than in running it.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "mdda", version, about = "Image restoration with dynamic convolution and transposed attention")]
struct Cli {
    /// Worker threads for the tensor kernels (default: all cores). With 1
    /// thread, runs with the same seed are bit-identical.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, loss and evaluation CSVs.
    Train(train::TrainArgs),
    /// Restore every image in a directory with a trained checkpoint.
    Infer(images::InferArgs),
    /// Score restored images against clean references.
    Eval(images::EvalArgs),
    /// Report parameter and FLOP counts and CPU forward latency.
    Bench(bench::BenchArgs),
    /// Cut clean patches from images and write degraded / clean pairs.
    MakeData(make_data::MakeDataArgs),
}

/// Model selection shared by commands that build a fresh model.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Model preset: full, small or tiny. Replaces the config's model.
    #[arg(long)]
    pub preset: Option<String>,
    /// Stage layout such as C-T-C or C-C-C-T-C-C-C.
    #[arg(long)]
    pub layout: Option<String>,
}

impl ModelArgs {
    pub fn run_config(&self) -> anyhow::Result<config::RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::RunConfig::load(p)?,
            None => config::RunConfig::with_preset("tiny"),
        };
        if let Some(p) = &self.preset {
            cfg.model = config::ModelSection::preset(p);
        }
        if let Some(l) = &self.layout {
            cfg.model.layout = Some(l.parse().map_err(|e: mdda::Error| Usage(e.to_string()))?);
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Infer(a) => images::infer(a),
        Command::Eval(a) => images::eval(a),
        Command::Bench(a) => bench::run(a),
        Command::MakeData(a) => make_data::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 1 } else { 2 })
        }
    }
}

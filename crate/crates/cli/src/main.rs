//! `mtmrc`: data preparation, sample weighting and multi-task training for
//! reading comprehension.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric error.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{Overrides, RunConfig};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "mtmrc", version, about = "Multi-task reading comprehension with cross-entropy-difference sample weights")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Tokenize and validate a raw dataset file and write it in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "span-json")]
        format: String,
        #[arg(long, default_value_t = 1)]
        task: u32,
        /// Truncate passages to this many tokens (0 keeps them whole).
        #[arg(long, default_value_t = mtmrc::corpus::DEFAULT_MAX_PASSAGE_TOKENS)]
        max_passage_tokens: usize,
    },
    /// Sample counts and average lengths of dataset files (default: the config's).
    Stats { files: Vec<PathBuf> },
    /// Map free-text answers to their best-matching passage spans.
    ConvertSpan {
        #[arg(long)]
        input: PathBuf,
        /// Minimum ROUGE-L of the chosen span.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 2)]
        task: u32,
    },
    /// Train and save the question and answer-length models of every task.
    TrainLm,
    /// Score auxiliary samples and write their weights.
    Weights,
    /// Dry-run the batch schedule.
    Schedule {
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Train a model and keep the best dev checkpoint.
    Train,
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the config's dev file.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train in mixture mode over a grid of ratios and tabulate dev metrics.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Write a synthetic benchmark and a matching config.
    GenSynth {
        #[arg(long, value_enum, default_value_t = Benchmark::ThreeTask)]
        benchmark: Benchmark,
        #[arg(long, default_value_t = 1000)]
        target_size: usize,
        #[arg(long, default_value_t = 300)]
        dev_size: usize,
        /// Size of each auxiliary task.
        #[arg(long, default_value_t = 2000)]
        aux_size: usize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Benchmark {
    /// Target, a related auxiliary task and a distant one with run-on answers.
    ThreeTask,
    /// Target, a same-distribution auxiliary task and a disjoint-vocabulary one.
    Weighting,
    /// Find-the-question-word task, target and dev only.
    Copy,
}

/// A failed command: message and exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<mtmrc::Error> for Failure {
    fn from(e: mtmrc::Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

/// What a command read and wrote, for the manifest.
#[derive(Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let start = Instant::now();
    let overrides = Overrides {
        seed: cli.global.seed,
        out: cli.global.out.clone(),
        deterministic: cli.global.deterministic,
    };
    let cfg = RunConfig::load(cli.global.config.as_deref(), &overrides)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", out.display())))?;

    let mut record = match &cli.command {
        Command::Ingest {
            input,
            format,
            task,
            max_passage_tokens,
        } => commands::ingest(&out, input, format, *task, *max_passage_tokens)?,
        Command::Stats { files } => commands::stats(&cfg, &out, files)?,
        Command::ConvertSpan { input, threshold, task } => commands::convert_span(&out, input, *threshold, *task)?,
        Command::TrainLm => commands::train_lm(&cfg, &out)?,
        Command::Weights => commands::weights(&cfg, &out)?,
        Command::Schedule { epochs } => commands::schedule(&cfg, &out, *epochs)?,
        Command::Train => commands::train(&cfg, &out)?,
        Command::Eval { checkpoint, data } => commands::eval(&cfg, &out, checkpoint.as_deref(), data.as_deref())?,
        Command::Sweep { alphas } => commands::sweep(&cfg, &out, alphas.as_deref())?,
        Command::GenSynth {
            benchmark,
            target_size,
            dev_size,
            aux_size,
        } => commands::gen_synth(&cfg, &out, *benchmark, *target_size, *dev_size, *aux_size)?,
    };
    if let Some(c) = &cli.global.config {
        record.inputs.insert(0, c.clone());
    }

    let manifest = RunManifest {
        command: serde_json::to_value(&cli.command)
            .ok()
            .and_then(|v| match v {
                serde_json::Value::String(s) => Some(s),
                serde_json::Value::Object(m) => m.keys().next().cloned(),
                _ => None,
            })
            .unwrap_or_default(),
        config: serde_json::json!({
            "run": cfg,
            "arguments": cli.command,
            "flags": cli.global,
        }),
        seed: cfg.seed,
        inputs: RunManifest::digests(&record.inputs)?,
        outputs: record.outputs,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    let path = manifest.write(&out)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

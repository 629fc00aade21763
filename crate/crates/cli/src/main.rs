mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "selectp",
    version,
    about = "Prompt compression with a learned token selector"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON file with parameters; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic key-value corpus and task files.
    Synth(SynthFlags),
    /// Train a tokenizer and a base causal language model.
    Pretrain(PretrainFlags),
    /// Train adapters and the selection head on a frozen base model.
    TrainSelector(TrainSelectorFlags),
    /// Compress a text file.
    Compress(CompressFlags),
    /// In-context-learning evaluation over several demonstration seeds.
    Eval(EvalFlags),
    /// Compress with one checkpoint, score with another.
    Transfer(TransferFlags),
    /// Latency of compressed versus uncompressed trials.
    Bench(BenchFlags),
    /// Signal correlations and part-of-speech preservation.
    Analyze(AnalyzeFlags),
    /// Summary tables over a results directory.
    Report(ReportFlags),
}

#[derive(Args, Serialize)]
pub struct SynthFlags {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    n_keys: Option<usize>,
    #[arg(long)]
    filler_ratio: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct PretrainFlags {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse an existing tokenizer instead of training one.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    segment_length: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct TrainSelectorFlags {
    /// Base checkpoint directory.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    segment_length: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    keep_ratio_schedule: Option<Vec<f64>>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// hard-ste or soft.
    #[arg(long)]
    mask_mode: Option<String>,
    /// attention-invisibility or embedding-zeroing.
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct CompressFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    /// selection-p, ppl, random or demo-truncate.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    segment_size: Option<usize>,
    /// Demonstration separator for demo-truncate.
    #[arg(long)]
    separator: Option<String>,
    /// Write per-token scores and the mask here.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct EvalFlags {
    #[arg(long)]
    task: Option<PathBuf>,
    /// Inference checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Selector checkpoint; defaults to the inference checkpoint.
    #[arg(long)]
    compressor: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    max_test: Option<usize>,
    /// sum or mean.
    #[arg(long)]
    reduction: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TransferFlags {
    #[arg(long)]
    compress_checkpoint: Option<PathBuf>,
    #[arg(long)]
    infer_checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BenchFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmups: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AnalyzeFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ReportFlags {
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match &cli.command {
        Command::Synth(f) => commands::synth(cfg, f),
        Command::Pretrain(f) => commands::pretrain(cfg, f),
        Command::TrainSelector(f) => commands::train_selector(cfg, f),
        Command::Compress(f) => commands::compress(cfg, f),
        Command::Eval(f) => commands::eval(cfg, f),
        Command::Transfer(f) => commands::transfer(cfg, f),
        Command::Bench(f) => commands::bench(cfg, f),
        Command::Analyze(f) => commands::analyze(cfg, f),
        Command::Report(f) => commands::report(cfg, f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

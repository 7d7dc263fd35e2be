//! Command-line surface. Every flag that shapes an artifact is echoed into
//! the run's manifest, so each argument struct also derives `Serialize`.
//!
//! An optional `--config <file>` of `key=value` lines (keys are the long flag
//! names without the leading dashes) supplies defaults; flags given on the
//! command line always win. [`expand_config_args`] rewrites the argument
//! vector before clap sees it, inserting the file's settings right after the
//! subcommand, and `args_override_self` lets the later, user-provided
//! occurrence override them.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "lencon",
    version,
    about = "Length-controllable neural encoder-decoders: generate corpora, train, decode, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic prefix-truncation corpus (train/valid/test TSVs).
    GenCorpus(GenCorpusArgs),
    /// Train an encoder-decoder variant and write a checkpoint.
    Train(TrainArgs),
    /// Decode a corpus under free, fixlen, fixrng, or learned control.
    Decode(DecodeArgs),
    /// Score decoded outputs with ROUGE and permutation significance tests.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenCorpusArgs {
    /// Training pairs to generate.
    #[arg(long)]
    pub size: usize,
    /// Validation pairs (default: size/10, at least 1).
    #[arg(long)]
    pub valid_size: Option<usize>,
    /// Test pairs (default: size/10, at least 1).
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Content-word vocabulary size.
    #[arg(long, default_value_t = 40)]
    pub vocab_size: usize,
    /// Minimum source length in tokens.
    #[arg(long, default_value_t = 15)]
    pub source_min: usize,
    /// Maximum source length in tokens.
    #[arg(long, default_value_t = 30)]
    pub source_max: usize,
    /// Minimum target byte budget.
    #[arg(long, default_value_t = 10)]
    pub budget_min: usize,
    /// Maximum target byte budget.
    #[arg(long, default_value_t = 60)]
    pub budget_max: usize,
    /// Histogram bin width for the stats CSV.
    #[arg(long, default_value_t = 5)]
    pub bin_width: usize,
    /// key=value file of flag defaults; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Model variant: plain, lenemb, or leninit.
    #[arg(long)]
    pub variant: String,
    /// Training corpus TSV.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optimization updates to run in this invocation.
    #[arg(long, default_value_t = 1000)]
    pub updates: usize,
    /// Seeds parameter initialization and batch shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 80)]
    pub batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Global gradient-norm clipping threshold.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Word embedding dimension.
    #[arg(long, default_value_t = 100)]
    pub embed_dim: usize,
    /// LSTM hidden dimension.
    #[arg(long, default_value_t = 200)]
    pub hidden_dim: usize,
    /// Length-embedding dimension (lenemb variant).
    #[arg(long, default_value_t = 100)]
    pub len_embed_dim: usize,
    /// Distinct remaining-length embeddings (lenemb variant).
    #[arg(long, default_value_t = 300)]
    pub len_types: usize,
    /// Examples sampled per shuffling cycle.
    #[arg(long, default_value_t = 800_000)]
    pub sample_pool: usize,
    /// Updates between resampling cycles.
    #[arg(long, default_value_t = 10_000)]
    pub regroup_every: usize,
    /// Source vocabulary cap (most frequent kept).
    #[arg(long, default_value_t = 30_000)]
    pub src_vocab: usize,
    /// Target vocabulary cap.
    #[arg(long, default_value_t = 30_000)]
    pub tgt_vocab: usize,
    /// Overwrite the checkpoint every N updates (0 = final only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Loss-curve CSV path (default: <out>.loss.csv).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Resume from an existing checkpoint; the update counter continues.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Progress to stderr every N updates (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// key=value file of flag defaults; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct DecodeArgs {
    /// Checkpoint path (vocabulary sidecar expected next to it).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input corpus TSV; only the source column is used.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file: one `desired<TAB>bytes<TAB>logprob<TAB>summary` per line.
    #[arg(long)]
    pub out: PathBuf,
    /// free, fixlen, fixrng, or learned.
    #[arg(long, default_value = "free")]
    pub method: String,
    /// Desired byte length: the fixlen bound, and the length wired into
    /// length-conditioned models under any method.
    #[arg(long)]
    pub length: Option<usize>,
    /// fixrng minimum bytes (default 0).
    #[arg(long)]
    pub min: Option<usize>,
    /// fixrng maximum bytes (unbounded when absent).
    #[arg(long)]
    pub max: Option<usize>,
    /// Hard constraint for learned decoding: outputs never exceed --length.
    #[arg(long, default_value_t = false)]
    pub hard: bool,
    /// Beam width (default 10; 30 for fixrng and for hard learned decoding).
    #[arg(long)]
    pub beam: Option<usize>,
    /// Overrides the derived decoder step cap.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Documents decoded in parallel; output order always matches the input.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// key=value file of flag defaults; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    /// System outputs as name=path (repeatable). A bare path uses the file
    /// stem as the system name.
    #[arg(long, required = true)]
    pub outputs: Vec<String>,
    /// Reference corpus TSV (repeatable; each file's target column becomes
    /// one reference per document).
    #[arg(long, required = true)]
    pub references: Vec<PathBuf>,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated byte limits for truncation before scoring.
    #[arg(long, default_value = "30,50,75")]
    pub limits: String,
    /// Permutation-test iterations (sampled mode; small document counts use
    /// exact enumeration instead).
    #[arg(long, default_value_t = 100_000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Length-histogram bin width.
    #[arg(long, default_value_t = 5)]
    pub bin_width: usize,
    /// Documents scored in parallel; the report is independent of the count.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// key=value file of flag defaults; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Rewrites `argv`, inserting `--key value` pairs from the `--config` file
/// (if any) directly after the subcommand so later command-line flags
/// override them. Boolean keys use `true`/`false`; `false` simply omits the
/// flag. Lines that are empty or start with `#` are skipped.
pub fn expand_config_args(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Ok(argv);
    }
    let mut config_path: Option<String> = None;
    let mut i = 2;
    while i < argv.len() {
        if argv[i] == "--config" {
            config_path = argv.get(i + 1).cloned();
            i += 2;
        } else if let Some(p) = argv[i].strip_prefix("--config=") {
            config_path = Some(p.to_string());
            i += 1;
        } else {
            i += 1;
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let mut expanded: Vec<String> = argv[..2].to_vec();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{path}:{}: expected key=value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "config" {
            continue;
        }
        match value {
            "true" => expanded.push(format!("--{key}")),
            "false" => {}
            _ => {
                expanded.push(format!("--{key}"));
                expanded.push(value.to_string());
            }
        }
    }
    expanded.extend(argv[2..].iter().cloned());
    Ok(expanded)
}

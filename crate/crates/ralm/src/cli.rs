//! Argument definitions, config-file merging and exit-status handling.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};

use crate::config::{self, OUT_DIR_ENV};
use crate::error::{exit, CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "ralm", version, about = "Retrieval-augmented decoding: prepend vs append context patterns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Time generation under each context pattern and write CSV + SVG.
    Bench(BenchArgs),
    /// Decode from a prompt, optionally retrieving from an index.
    Generate(GenerateArgs),
    /// Train marking-token embeddings and adapters on a frozen base.
    Finetune(FinetuneArgs),
    /// Continuous-retrieval perplexity of a text.
    Eval(EvalArgs),
    /// Ingest a corpus and write a BM25 index file.
    Index(IndexArgs),
    /// Compare measured FLOPs with the closed-form cost model.
    Reconcile(ReconcileArgs),
}

impl Command {
    pub fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Bench(a) => a.config.as_deref(),
            Command::Generate(a) => a.config.as_deref(),
            Command::Finetune(a) => a.config.as_deref(),
            Command::Eval(a) => a.config.as_deref(),
            Command::Index(a) => a.config.as_deref(),
            Command::Reconcile(a) => a.config.as_deref(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory (also settable through RALM_OUT_DIR).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl OutArgs {
    /// Flag, then environment, then `out`; created if missing.
    pub fn resolve(&self) -> CliResult<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Load weights from a checkpoint instead of initialising a preset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model size: tiny, desk or bench.
    #[arg(long)]
    pub preset: Option<String>,
    /// Transformer blocks.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden size h.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// MLP inner width.
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    /// Longest context the model accepts.
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Adapter rank r.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    /// Adapter placement: kv or qkvo.
    #[arg(long)]
    pub lora_targets: Option<String>,
    /// Position encoding: rotary or learned.
    #[arg(long)]
    pub position: Option<String>,
    /// Initialisation seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct RetrievalArgs {
    /// Pattern: none, prepend or append.
    #[arg(long, default_value = "append")]
    pub pattern: String,
    /// Tokens between retrievals.
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Trailing tokens used as the query.
    #[arg(long, default_value_t = 16)]
    pub query_len: usize,
    /// Retrieved documents are cut to this many tokens.
    #[arg(long, default_value_t = 128)]
    pub max_evidence: usize,
    /// Bracket evidence with the marking tokens.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub marks: bool,
    /// BM25 index to retrieve from.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Use one random document of this many tokens instead of an index.
    #[arg(long, conflicts_with = "index")]
    pub fixed_evidence: Option<usize>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    /// Scenario file of `key = value` settings.
    #[arg(long, visible_alias = "scenario")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated patterns to compare.
    #[arg(long, default_value = "prepend,append")]
    pub patterns: String,
    /// Comma-separated final context lengths (prompt + evidence + generated).
    #[arg(long, default_value = "1024,2048,3072")]
    pub lengths: String,
    /// Prompt tokens.
    #[arg(long, default_value_t = 512)]
    pub prompt_len: usize,
    /// Draw prompt lengths from U{prompt-len, prompt-len-max}.
    #[arg(long)]
    pub prompt_len_max: Option<usize>,
    /// Pseudo-evidence length in tokens.
    #[arg(long, default_value_t = 128)]
    pub evidence: usize,
    /// Comma-separated retrieval strides (several make a stride sweep).
    #[arg(long, default_value = "16")]
    pub strides: String,
    /// Trailing tokens used as the query.
    #[arg(long, default_value_t = 16)]
    pub query_len: usize,
    /// Timed runs per configuration (at least 3).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Untimed runs before the timed ones.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bracket evidence with the marking tokens.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub marks: bool,
    /// Only redraw the SVG from an existing bench CSV.
    #[arg(long)]
    pub replot: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
#[command(group = clap::ArgGroup::new("prompt_source").args(["prompt", "prompt_file", "prompt_random"]).required(true))]
pub struct GenerateArgs {
    /// File of `key = value` settings; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Prompt text (byte-level tokens).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Read the prompt from a file.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Random prompt of this many tokens.
    #[arg(long)]
    pub prompt_random: Option<usize>,
    /// Tokens to generate.
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// 0 means greedy decoding.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compare every step with a full recomputation.
    #[arg(long)]
    pub verify_oracle: bool,
    /// Average the distributions of this many documents (append only).
    #[arg(long)]
    pub ensemble: Option<usize>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
#[command(group = clap::ArgGroup::new("train_source").args(["train", "dataset"]).required(true))]
pub struct FinetuneArgs {
    /// File of `key = value` settings; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Text file or directory to cut training windows from.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Ready-made JSON-lines dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Window length T; targets start in U{T/2, T-s}.
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    /// Keep at most this many training windows.
    #[arg(long)]
    pub max_examples: Option<usize>,
    /// Optimizer steps.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Fraction of steps spent warming up.
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    /// Examples per step.
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference check on this many trainable coordinates.
    #[arg(long, default_value_t = 0)]
    pub grad_check: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// File of `key = value` settings; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Text file or directory to score.
    #[arg(long)]
    pub text: PathBuf,
    /// Tokens per evaluation chunk (cut to a multiple of the stride).
    #[arg(long, default_value_t = 256)]
    pub chunk_len: usize,
    /// Also score the marking tokens.
    #[arg(long)]
    pub include_marks: bool,
    /// Recompute without the cache and require agreement.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct IndexArgs {
    /// File of `key = value` settings; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// Directory of documents or a JSON-lines file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// File of document ids to leave out, one per line.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// BM25 term-frequency saturation.
    #[arg(long, default_value_t = 0.9)]
    pub k1: f64,
    /// BM25 length normalisation.
    #[arg(long, default_value_t = 0.4)]
    pub b: f64,
    /// Index file to write (default: <out-dir>/index.bin).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ReconcileArgs {
    /// File of `key = value` settings; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// none, prepend, append or all.
    #[arg(long, default_value = "all")]
    pub pattern: String,
    /// Transformer blocks.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Hidden size h.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Adapter rank r.
    #[arg(long, default_value_t = 16)]
    pub lora_rank: usize,
    /// Maximum sequence length T.
    #[arg(long, default_value_t = 64)]
    pub t: usize,
    /// Retrieval stride s (T must be a multiple).
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Evidence tokens d per retrieval.
    #[arg(long, default_value_t = 128)]
    pub evidence: usize,
    /// Bracket evidence with marks and count them in d.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub marks: bool,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Rebuilds `argv` with the settings of the subcommand's config file
/// placed before the command-line flags, which therefore win.
fn merge_config(argv: &[OsString], cli: &Cli) -> CliResult<Option<Vec<OsString>>> {
    let Some(path) = cli.command.config_path() else { return Ok(None) };
    let mut entries = config::read_config(path)?;
    if std::env::var_os(OUT_DIR_ENV).is_some() {
        entries.retain(|e| e.key != "out-dir");
    }
    let name = argv.get(1).and_then(|s| s.to_str()).unwrap_or_default();
    let root = Cli::command();
    let sub = root.find_subcommand(name).ok_or_else(|| CliError::Usage(format!("unknown subcommand {name:?}")))?;
    let extra = config::entries_to_args(&entries, sub).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut merged = argv[..2].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[2..]);
    Ok(Some(merged))
}

fn parse(argv: &[OsString]) -> Result<Cli, i32> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return Err(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match merge_config(argv, &cli) {
        Ok(None) => Ok(cli),
        Ok(Some(merged)) => Cli::try_parse_from(&merged).map_err(|e| {
            eprintln!("error: config: {}", e.to_string().trim_start_matches("error: ").trim_end());
            exit::DATA
        }),
        Err(e) => {
            eprintln!("error: {e}");
            Err(e.exit_code())
        }
    }
}

/// Parses `argv`, runs the subcommand and returns the exit status.
pub fn main_with_args(argv: Vec<OsString>) -> i32 {
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = match cli.command {
        Command::Bench(a) => crate::commands::bench_cmd(a),
        Command::Generate(a) => crate::commands::generate_cmd(a),
        Command::Finetune(a) => crate::commands::finetune_cmd(a),
        Command::Eval(a) => crate::commands::eval_cmd(a),
        Command::Index(a) => crate::commands::index_cmd(a),
        Command::Reconcile(a) => crate::commands::reconcile_cmd(a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

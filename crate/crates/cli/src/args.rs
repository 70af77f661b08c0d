use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use epimem::scoring::ContextPolicy;

#[derive(Debug, Parser, Serialize)]
#[command(name = "epimem", version, about = "Episodic-memory augmented language model pipeline")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// File of `key = value` lines supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Run manifests are appended to this file, one JSON object per run.
    #[arg(long, global = true, default_value = "epimem-runs.jsonl", value_name = "FILE")]
    pub manifest: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Build a TF-IDF index over a corpus.
    #[command(args_override_self = true)]
    Index(IndexArgs),
    /// Retrieve and filter a context document for every query document.
    #[command(args_override_self = true)]
    Pairs(PairsArgs),
    /// Train the byte-level model from scratch on query/context pairs.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score documents with and without context and report perplexity.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Expose a scorer over the line protocol (stdio, or TCP with --listen).
    #[command(args_override_self = true)]
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Index(_) => "index",
            Command::Pairs(_) => "pairs",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    /// JSONL corpus to index.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PairsArgs {
    /// JSONL corpus of query documents.
    #[arg(long)]
    pub queries: PathBuf,
    /// Index built by `epimem index` over the memory corpus.
    #[arg(long)]
    pub index: PathBuf,
    /// Query sentence counts, comma separated.
    #[arg(long, default_value = "1,2,5", value_parser = parse_k_list)]
    pub k: KList,
    #[arg(long, default_value_t = 20)]
    pub top_n: usize,
    #[arg(long, default_value_t = 14)]
    pub window_days: u32,
    /// κ in (0, 1]: candidates above κ·α cosine are near-duplicates.
    #[arg(long, default_value_t = 0.6, value_parser = parse_cosine_factor)]
    pub cosine_factor: f64,
    /// Accept contexts from the query's own source.
    #[arg(long)]
    pub allow_same_source: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Queries left without context; defaults to `<out>.unpaired.jsonl`.
    #[arg(long)]
    pub unpaired: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(transparent)]
pub struct KList(pub Vec<usize>);

fn parse_k_list(s: &str) -> Result<KList, String> {
    let ks = s
        .split(',')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("{p:?} is not a positive integer")),
            Ok(k) => Ok(k),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KList(ks))
}

fn parse_cosine_factor(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("cosine factor must lie in (0, 1], got {v}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Pair file from `epimem pairs`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Corpus holding the retrieved documents.
    #[arg(long)]
    pub memory: PathBuf,
    /// Train on the pairs retrieved with this k.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 384)]
    pub e: usize,
    /// Attention heads; must divide `--e`.
    #[arg(long, default_value_t = 6)]
    pub h: usize,
    /// Transformer blocks.
    #[arg(long, default_value_t = 6)]
    pub l: usize,
    #[arg(long, default_value_t = 512)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss records; defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSONL corpus of documents to score.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pair file; required by `--policy retrieved`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Corpus holding context documents; required unless `--policy none`.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Prebuilt index over `--memory`, used by `--policy irrelevant`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// `uniform`, `builtin:<checkpoint>`, `cmd:<command line>` or `tcp:<host:port>`.
    #[arg(long, default_value = "uniform")]
    pub scorer: String,
    /// Report columns, comma separated: `woc` and/or sentence counts.
    #[arg(long, default_value = "woc,1,2,5")]
    pub k: String,
    #[arg(long, default_value = "retrieved", value_parser = parse_policy)]
    #[serde(serialize_with = "ser_policy")]
    pub policy: ContextPolicy,
    /// Context bytes admitted before truncation.
    #[arg(long, default_value_t = 1 << 20)]
    pub context_budget: usize,
    #[arg(long, default_value_t = 0.01)]
    pub max_failure_rate: f64,
    /// Per-document scores, one JSON object per line.
    #[arg(long, default_value = "scores.jsonl")]
    pub scores: PathBuf,
    /// Also write the report table here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the published reference tables after the report.
    #[arg(long)]
    pub show_reference: bool,
    /// Parallel connections to an external scorer.
    #[arg(long, default_value_t = 1)]
    pub connections: usize,
    /// Seconds to wait for any one response from an external scorer.
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
    /// Requests in flight per connection.
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// `uniform` or `builtin:<checkpoint>`.
    #[arg(long, default_value = "uniform")]
    pub scorer: String,
    /// Listen on this TCP address instead of standard streams.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

fn parse_policy(s: &str) -> Result<ContextPolicy, String> {
    s.parse()
}

fn ser_policy<S: serde::Serializer>(p: &ContextPolicy, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(p.name())
}

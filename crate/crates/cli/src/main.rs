//! `posforge` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation error, 2 transport error, 3 data
//! error. Failures are also reported on stderr as one JSON record.

mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posforge::{Error, ErrorKind};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "posforge", version, about = "Position-controlled retrieval datasets and positional-bias evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Consensus margin threshold.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Training configuration name or `b:m:e` ratio.
    #[arg(long, global = true)]
    pub ratio: Option<String>,
    /// Personas retrieved per document.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recompute a stage even if it completed before.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Bin the corpus by length and attach segment offsets.
    Bin {
        /// Segments per document (3, 5 or 10).
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Generate positional query candidates.
    Generate,
    /// Score candidates with the reranker panel and apply the margin rule.
    Verify,
    /// Segment-wise yes/no audit of non-failing candidates.
    Audit {
        /// Audit at most this many candidates.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Cumulative filtering funnel over the verified candidates.
    FunnelReport,
    /// Sample training sets from the retained pool.
    Sample,
    /// Write training manifests for the sampled sets.
    ExportManifest,
    /// Position-wise nDCG@10 and PSI for a run.
    Eval(EvalArgs),
    /// Mean nDCG@10 by evidence start offset, plus the start distribution.
    BucketCurve(BucketArgs),
    /// Query/document cosine with the evidence moved to ten slots.
    EvidenceMove {
        /// JSONL of {query, text, evidence: [start, end]}.
        #[arg(long)]
        triples: PathBuf,
    },
    /// Cosine between each document and its ten segments.
    SegmentProfile {
        /// JSONL of {doc_id, text}; defaults to the binned corpus.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Mirror-reverse the fifths of every document.
    Reverse {
        /// JSONL of {doc_id, text}; defaults to the binned corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Front/back gap between original and reversed-corpus runs.
    ReversalReport(ReversalArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// TREC run file.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels_begin: PathBuf,
    #[arg(long)]
    pub qrels_middle: PathBuf,
    #[arg(long)]
    pub qrels_end: PathBuf,
    /// Optional evidence sidecar for a bucket curve.
    #[arg(long)]
    pub evidence: Option<PathBuf>,
    /// Label for the text report.
    #[arg(long, default_value = "run")]
    pub label: String,
}

#[derive(Args, Debug)]
pub struct BucketArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// One or more TREC qrels files.
    #[arg(long, required = true, num_args = 1..)]
    pub qrels: Vec<PathBuf>,
    #[arg(long)]
    pub evidence: PathBuf,
    /// Preset name or interval list; defaults to the config value.
    #[arg(long)]
    pub buckets: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReversalArgs {
    #[arg(long)]
    pub run_orig: PathBuf,
    #[arg(long)]
    pub run_rev: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub qrels: Vec<PathBuf>,
    /// Evidence sidecar locating each query's evidence in the original
    /// document.
    #[arg(long)]
    pub evidence: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 1,
        ErrorKind::Transport => 2,
        ErrorKind::Data => 3,
    }
}

fn report(e: &Error) -> ExitCode {
    let kind = e.kind();
    let record = json!({
        "error": {
            "kind": kind.as_str(),
            "message": e.to_string(),
            "attempts": e.attempts(),
        }
    });
    eprintln!("{record}");
    ExitCode::from(exit_code(kind))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(&Error::Validation(e.kind().to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

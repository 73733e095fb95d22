//! Position-controlled retrieval dataset construction and positional-bias
//! evaluation.
//!
//! Model inference (chat generation, embeddings, reranking) is reached only
//! through the client traits in [`clients`]; everything else is local and
//! deterministic.

pub mod analyze;
pub mod clients;
pub mod corpus;
pub mod jsonl;
pub mod mock;
pub mod parallel;
pub mod prompts;
pub mod querygen;
pub mod verify;
pub mod sample;
pub mod eval;

use thiserror::Error;

/// Coarse error category, used by the command line for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags or arguments.
    Validation,
    /// An inference service could not be reached or broke its contract.
    Transport,
    /// Input data is missing, malformed or insufficient.
    Data,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Transport => "transport",
            ErrorKind::Data => "data",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Client(#[from] clients::ClientError),
    #[error(transparent)]
    QueryGen(#[from] querygen::QueryGenError),
    #[error(transparent)]
    Verify(#[from] verify::VerifyError),
    #[error(transparent)]
    Sample(#[from] sample::SampleError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Analyze(#[from] analyze::AnalyzeError),
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Data(String),
}

fn client_kind(e: &clients::ClientError) -> ErrorKind {
    use clients::ClientError as C;
    match e {
        C::Transport { .. } | C::Status { .. } | C::Protocol { .. } | C::Cache(_) => ErrorKind::Transport,
        C::InvalidRequest(_) | C::Config(_) => ErrorKind::Validation,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Client(e)
            | Error::QueryGen(querygen::QueryGenError::Client(e))
            | Error::Verify(verify::VerifyError::Client(e))
            | Error::Analyze(analyze::AnalyzeError::Client(e)) => client_kind(e),
            Error::Verify(verify::VerifyError::BadThreshold(_) | verify::VerifyError::NoRerankers) => Validation,
            Error::Sample(sample::SampleError::BadRatio(_)) => Validation,
            Error::Eval(eval::EvalError::BadBucket(_) | eval::EvalError::UnknownPreset(_) | eval::EvalError::NoBins) => {
                Validation
            }
            Error::Analyze(analyze::AnalyzeError::BadSlot(_)) => Validation,
            Error::Prompt(_) | Error::Validation(_) => Validation,
            _ => Data,
        }
    }

    /// Retry count carried by transport failures.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            Error::Client(e)
            | Error::QueryGen(querygen::QueryGenError::Client(e))
            | Error::Verify(verify::VerifyError::Client(e))
            | Error::Analyze(analyze::AnalyzeError::Client(e)) => e.attempts(),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

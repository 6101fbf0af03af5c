use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the simulator, trainer and evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: field={field} reason={reason}")]
    Config { field: String, reason: String },

    #[error("{kind} id {index} out of range (len {len})")]
    Index {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training diverged at epoch {epoch} (mean loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("conditional rate undefined: item has zero exposures")]
    UndefinedRate,

    #[error("inconsistent counts: {positives} positives exceed {exposures} exposures")]
    InconsistentCounts { positives: u64, exposures: u64 },

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("no feasible gamma: {0}")]
    NoFeasibleGamma(String),

    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_round(round: usize, source: Error) -> Self {
        Error::InRound {
            round,
            source: Box::new(source),
        }
    }
}

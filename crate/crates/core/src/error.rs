use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// The label cannot be emitted in the available number of frames.
    #[error("infeasible CTC pair{}: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats", utterance.as_ref().map(|u| format!(" for utterance `{u}`")).unwrap_or_default())]
    Infeasible {
        utterance: Option<String>,
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("brute-force guard: {0} alignments exceeds the enumeration limit")]
    TooLarge(u128),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient probe: {got} utterances, need at least {need}")]
    InsufficientProbe { got: usize, need: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Infeasible { .. } => "infeasible",
            Error::TooLarge(_) => "too_large",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Oracle(_) => "oracle",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::EmptyInput(_) => "empty_input",
            Error::InsufficientProbe { .. } => "insufficient_probe",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid code id {0:?}")]
    InvalidCode(String),
    #[error("cycle in hierarchy at code {0}")]
    Cycle(String),
    #[error("code {child} has conflicting parents {first} and {second}")]
    ConflictingParent {
        child: String,
        first: String,
        second: String,
    },
    #[error("unknown code {0}")]
    UnknownCode(String),
    #[error("unknown codes in record: {0:?}")]
    UnknownCodes(Vec<String>),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("edge bucket {bucket} out of range (table has {count})")]
    BucketOutOfRange { bucket: usize, count: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsatisfiable rule system: {0}")]
    Unsatisfiable(String),
    #[error("non-finite loss at note {note}")]
    NanLoss { note: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-greppable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonScalarLoss(_) | Error::BucketOutOfRange { .. } => {
                "shape"
            }
            Error::NonFinite(_) | Error::NanLoss { .. } => "nan",
            Error::InvalidCode(_)
            | Error::Cycle(_)
            | Error::ConflictingParent { .. }
            | Error::UnknownCode(_)
            | Error::UnknownCodes(_) => "ontology",
            Error::Parse { .. } | Error::Json(_) => "parse",
            Error::Empty(_) | Error::Config(_) => "config",
            Error::Unsatisfiable(_) => "unsatisfiable",
            Error::UndefinedMetric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

use thiserror::Error;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("duplicate image id: {0}")]
    Duplicate(String),
    #[error("invalid pair: left and right are both {0}")]
    InvalidPair(String),
    #[error("{what} out of range: {value}")]
    Range { what: String, value: f64 },
    #[error("non-finite numeric input: {0}")]
    Numeric(String),
    #[error("degenerate degrees of freedom: n = {n}, k = {k}")]
    DegenerateDof { n: usize, k: usize },
    #[error("MAPE undefined: y_true contains zero")]
    MapeUndefined,
    #[error("constant column: {0}")]
    ConstantColumn(String),
    #[error("need at least 2 items, got {0}")]
    InsufficientItems(usize),
    #[error("unknown image: {0}")]
    UnknownImage(String),
    #[error("zero variance input")]
    ZeroVariance,
    #[error("class {class} has {available} members, fewer than requested")]
    InsufficientClass { class: usize, available: usize },
    #[error("sample is empty")]
    EmptySample,
    #[error("stratum {stratum} has {size} members, fewer than 5")]
    StratumTooSmall { stratum: usize, size: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("model has no nonzero coefficients")]
    EmptyModel,
    #[error("missing feature block: {0}")]
    MissingBlock(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::StratumTooSmall { .. } | Error::InsufficientClass { .. } => {
                ErrorKind::Config
            }
            Error::Numeric(_)
            | Error::DegenerateDof { .. }
            | Error::MapeUndefined
            | Error::ZeroVariance
            | Error::Divergence { .. }
            | Error::Degenerate(_)
            | Error::ConstantColumn(_)
            | Error::EmptyModel => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

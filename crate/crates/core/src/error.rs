use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("explicit counts sum to {actual}, expected {expected}")]
    CountSumMismatch { expected: u64, actual: u64 },

    #[error("label {label:?} is not part of schema {schema:?}")]
    UnknownLabel { schema: String, label: String },

    #[error("schema mismatch: {left:?} vs {right:?}")]
    SchemaMismatch { left: String, right: String },

    #[error("bin {0:?} is already depleted")]
    DepletedBin(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid ground distance: {0}")]
    InvalidGroundDistance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no items annotated by both coders")]
    EmptyIntersection,

    #[error("missing claimed label on a tier that requires one")]
    MissingClaim,

    #[error("classifier failure: {0}")]
    Classifier(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(err: toml::de::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

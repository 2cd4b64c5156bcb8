use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("unknown element with atomic number {0}")]
    UnknownElement(u8),

    #[error("unknown element symbol {0:?}")]
    UnknownSymbol(String),

    #[error("rotation matrix is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing {kind} parameters for element pair {pair}")]
    MissingPairParameters { kind: &'static str, pair: String },

    #[error("calculator error: {0}")]
    Calculator(String),

    #[error("unknown calculator {0:?}")]
    UnknownCalculator(String),

    #[error("not at a minimum or ill-conditioned Hessian: {0}")]
    NotAMinimum(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown template tag {0:?}")]
    UnknownTag(String),

    #[error("element {symbol} (Z={z}) was not seen during training")]
    UnseenElement { z: u8, symbol: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Pipeline(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("alignment config error: {0}")]
    Alignment(String),
    #[error("weight transfer error for tensor `{tensor}`: {reason}")]
    Transfer { tensor: String, reason: String },
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },
    #[error("quantization error for tensor `{tensor}`: {reason}")]
    Quantize { tensor: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload for tensor `{tensor}`")]
    Truncated { tensor: String },
    #[error("unknown dtype tag {tag} for tensor `{tensor}`")]
    UnknownDtype { tensor: String, tag: u8 },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

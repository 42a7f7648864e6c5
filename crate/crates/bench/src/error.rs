use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] sgt_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("checkpoint {path} is for {found}, config expects {expected}")]
    DimensionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("bad ordering expression `{0}` (expected e.g. `ml<=sgt<=lmmse`)")]
    OrderingExpr(String),
    #[error("ordering expression names `{0}`, which has no BER rows")]
    OrderingDetector(String),
    #[error("{0} ordering violation(s)")]
    OrderingViolated(usize),
}

pub type Result<T> = std::result::Result<T, BenchError>;

use std::path::PathBuf;

use thiserror::Error;

use convasr_core::error::FormatError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("integrity check failed for {path}: expected {expected}, found {actual}")]
    Integrity { path: PathBuf, expected: String, actual: String },
    #[error("{0}")]
    Model(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: Box<PipelineError> },
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            s @ Self::Stage { .. } => s,
            e => Self::Stage { stage, source: Box::new(e) },
        }
    }

    /// Process exit code: 2 configuration, 3 i/o, 4 malformed input,
    /// 5 integrity, 6 model or training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Format(_) => 4,
            Self::Integrity { .. } => 5,
            Self::Model(_) => 6,
            Self::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl From<FormatError> for PipelineError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(io) => Self::Io { path: PathBuf::new(), source: io },
            other => Self::Format(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        Self::Format(e.to_string())
    }
}

/// Core errors split into malformed-input failures and model failures.
macro_rules! core_error {
    ($($($seg:ident)::+),*) => {$(
        impl From<$($seg)::+> for PipelineError {
            fn from(e: $($seg)::+) -> Self {
                match e {
                    $($seg)::+::Format(f) => f.into(),
                    other => Self::Model(other.to_string()),
                }
            }
        }
    )*};
}

core_error!(
    convasr_core::am::AmError,
    convasr_core::graph::GraphError,
    convasr_core::lm::LmError,
    convasr_core::score::ScoreError,
    convasr_core::rescore::RescoreError,
    convasr_core::combine::CombineError
);

pub type Result<T> = std::result::Result<T, PipelineError>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("upsampling from {from} fps to {to} fps is not supported")]
    UpsamplingUnsupported { from: f64, to: f64 },

    #[error("clip too short: window {window_s} s exceeds duration {duration_s} s")]
    ClipTooShort { window_s: f64, duration_s: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("label out of range: {0}")]
    LabelOutOfRange(String),

    #[error("gradient set mismatch: {0}")]
    GradientMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("cache file version {found} is not supported (expected {expected}); regenerate or upgrade the cache")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{stage} stage failed for task '{task}': {source}")]
    Stage {
        stage: &'static str,
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, task: &str) -> Self {
        Error::Stage {
            stage,
            task: task.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

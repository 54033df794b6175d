use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Variants mirror the failure classes the CLI maps onto exit codes, so the
/// orchestration layer can tell an unreadable input from a bad configuration.
#[derive(Debug, thiserror::Error)]
pub enum VosError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("ordering error: frame {got} does not follow frame {last}")]
    Ordering { last: usize, got: usize },
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("synthetic spec error: {0}")]
    Spec(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VosError>,
    },
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VosError>;

impl VosError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        VosError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        VosError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VosError::Io { path: Some(path.into()), source }
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ VosError::Stage { .. } => already,
            other => VosError::Stage { stage, source: Box::new(other) },
        }
    }
}

impl From<std::io::Error> for VosError {
    fn from(source: std::io::Error) -> Self {
        VosError::Io { path: None, source }
    }
}

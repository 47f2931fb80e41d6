use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum HtpError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("empty support: every entry of the row is masked out")]
    EmptySupport,
    #[error("mask not binary: entry {value} at {index}")]
    MaskNotBinary { value: f64, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HtpError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HtpError>;

impl HtpError {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        HtpError::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HtpError::InvalidArgument(msg.into())
    }

    /// An I/O error that names the file involved.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        HtpError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Process exit status: 2 for bad configuration or arguments, 3 for I/O
    /// and malformed files, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HtpError::Stage { source, .. } => source.exit_code(),
            HtpError::Config { .. } | HtpError::InvalidArgument(_) | HtpError::Shape { .. } | HtpError::Json(_) => 2,
            HtpError::Io(_) | HtpError::Csv(_) | HtpError::Format(_) => 3,
            HtpError::EmptySupport | HtpError::MaskNotBinary { .. } => 1,
        }
    }
}

/// Tag an error with the pipeline stage it came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| HtpError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate scale: tensor has no nonzero entry")]
    DegenerateScale,
    #[error("training failed: accuracy {accuracy:.4} below floor {floor:.4}")]
    TrainingFailure { accuracy: f64, floor: f64 },
    #[error("invalid bit address: {0}")]
    Address(String),
    #[error("snapshot does not belong to this model: {0}")]
    Lineage(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no applicable action in the current state")]
    StuckState,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a stage failing at run time.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Json(_) | Error::Csv(_) | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

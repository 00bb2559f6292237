use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage that produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decode,
    Tracking,
    Depth,
    Emotion,
    Extraction,
    Regressor,
    Fusion,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Decode => "decode",
            Stage::Tracking => "tracking",
            Stage::Depth => "depth",
            Stage::Emotion => "emotion",
            Stage::Extraction => "extraction",
            Stage::Regressor => "regressor",
            Stage::Fusion => "fusion",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("teacher {teacher_id} appears in both train and validation splits")]
    Leakage { teacher_id: String },

    #[error("label {label} references unknown segment {segment_id}")]
    DanglingLabel { label: String, segment_id: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unknown teacher {0} in validation set")]
    UnknownTeacher(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("zero variance input: correlation is undefined")]
    ZeroVariance,

    #[error("reliability undefined: {0}")]
    UndefinedReliability(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} failed at frame {frame_index}: {message}")]
    Pipeline {
        stage: Stage,
        frame_index: usize,
        message: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

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

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad configuration or invocation rather than data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

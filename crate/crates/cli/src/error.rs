use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] avlm::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PipelineError>,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("artifact `{path}` does not match the hash recorded by stage `{stage}`")]
    Tampered { stage: String, path: String },

    #[error("stage `{stage}` needs `{needs}`, which no earlier stage produced")]
    MissingUpstream { stage: String, needs: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error at {path}: {source}")]
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

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

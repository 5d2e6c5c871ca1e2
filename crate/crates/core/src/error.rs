use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Location of a stage inside a cascade: `device` indexes the branch devices
/// first (`0..D`), the root device is `D`. Stages are 0-based within a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageCoord {
    pub device: usize,
    pub stage: usize,
}

impl std::fmt::Display for StageCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "device {} stage {}", self.device, self.stage)
    }
}

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training failed{}{}: {message}",
        .stage.map(|s| format!(" at stage {s}")).unwrap_or_default(),
        .epoch.map(|e| format!(" in epoch {e}")).unwrap_or_default())]
    Training { stage: Option<usize>, epoch: Option<usize>, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CascadeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CascadeError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CascadeError>;

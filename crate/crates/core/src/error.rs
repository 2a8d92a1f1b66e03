use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MocapError {
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid {what}: {check}")]
    Invariant { what: &'static str, check: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("marker `{marker}` is not visible at frame {frame}")]
    Invisible { marker: String, frame: usize },

    #[error("no occlusion profile: every per-marker occlusion probability is zero")]
    NoOcclusionProfile,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("eigen decomposition failed")]
    Eigen,

    #[error(transparent)]
    Nn(#[from] nnkit::NnError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MocapError> = std::result::Result<T, E>;

pub(crate) fn invariant(what: &'static str, check: impl Into<String>) -> MocapError {
    MocapError::Invariant {
        what,
        check: check.into(),
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| MocapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| MocapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

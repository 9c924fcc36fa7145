use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] chromashift_core::error::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint {path}: checksum mismatch (file truncated or corrupt)")]
    Checksum { path: PathBuf },

    #[error("checkpoint {path}: format version {found}, expected {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("checkpoint {path}: model config fingerprint {found:016x} does not match {expected:016x}")]
    ConfigMismatch { path: PathBuf, found: u64, expected: u64 },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// Errors caused by what the user asked for rather than by the run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config { .. } | Self::Core(chromashift_core::error::Error::Config(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] srood_core::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest row {line}: {reason}")]
    ManifestRow { line: usize, reason: String },
    #[error("duplicate path {0}")]
    DuplicatePath(String),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("empty split {0}")]
    EmptySplit(&'static str),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unsupported channel count {channels} in {path}")]
    UnsupportedChannels { path: PathBuf, channels: usize },
    #[error("grid rows differ in length")]
    GridRows,
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("missing prerequisite {0}")]
    MissingPrerequisite(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
    let path = path.into();
    move |source| AppError::Io { path, source }
}

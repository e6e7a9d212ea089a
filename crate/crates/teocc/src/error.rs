use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: missing TEOC magic bytes", path.display())]
    BadMagic { path: PathBuf },
    #[error("{}: unsupported format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: String },
    #[error("{}: unknown dtype code {code}", path.display())]
    UnknownDtype { path: PathBuf, code: u8 },
    #[error("{}: truncated, expected {expected} bytes but found {found}", path.display())]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{}: field `{field}`: {detail}", path.display())]
    Parse { path: PathBuf, field: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error(transparent)]
    Core(#[from] teocc_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn parse_err(path: impl Into<PathBuf>, field: impl Into<String>, detail: impl ToString) -> Error {
    Error::Parse { path: path.into(), field: field.into(), detail: detail.to_string() }
}

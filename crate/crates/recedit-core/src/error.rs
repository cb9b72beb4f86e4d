use thiserror::Error;

/// Errors surfaced by the core pipeline.
///
/// The variants map onto the CLI exit-code contract: `Input`, `Config` and
/// `Data` are caller mistakes, `Numerical` means a solver or optimizer gave
/// up, `Io` wraps filesystem failures on artifacts.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl CoreError {
    pub fn input(msg: impl Into<String>) -> Self {
        CoreError::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

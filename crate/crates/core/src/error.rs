use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("length mismatch in {}: {detail}", path.display())]
    LengthMismatch { path: PathBuf, detail: String },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("invalid manifest {}: {detail}", path.display())]
    Manifest { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (L_c = {l_c}, L_dis = {l_dis})")]
    NonFiniteLoss { step: usize, l_c: f64, l_dis: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code for each error kind, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 1,
            Error::Contract(_) => 2,
            Error::MissingFile(_) => 3,
            Error::LengthMismatch { .. } => 4,
            Error::LabelOutOfRange { .. } => 5,
            Error::Manifest { .. } => 6,
            Error::Config(_) => 7,
            Error::NonFiniteLoss { .. } => 8,
            Error::Checkpoint(_) => 9,
            Error::Io { .. } => 10,
            Error::Json(_) => 11,
            Error::Csv(_) => 12,
        }
    }

    /// Process exit status for the CLI: 3 for numerical failure, 2 otherwise.
    pub fn exit_status(&self) -> u8 {
        match self {
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use dim_err;

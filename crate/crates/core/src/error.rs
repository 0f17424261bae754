// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failures of a weight or SAE container on disk.
#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("manifest missing at {0}")]
    ManifestMissing(PathBuf),
    #[error("blob missing at {0}")]
    BlobMissing(PathBuf),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch for tensor `{tensor}`: {detail}")]
    Checksum { tensor: String, detail: String },
    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from manifest")]
    MissingTensor(String),
    #[error("unsupported dtype `{0}` (only f32le)")]
    Dtype(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid record: {0}")]
    Record(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "numerics.shape",
            Error::Range(_) => "range",
            Error::Degenerate(_) => "numerics.degenerate",
            Error::NonFinite(_) => "numerics.non_finite",
            Error::Length { .. } => "model.length",
            Error::Vocab(_) => "vocab",
            Error::Spec(_) => "synthetic.spec",
            Error::InsufficientData(_) => "score.insufficient_data",
            Error::EmptyInput(_) => "eval.empty_input",
            Error::Record(_) => "records.invalid",
            Error::Container(c) => match c {
                ContainerError::ManifestMissing(_) => "container.manifest_missing",
                ContainerError::BlobMissing(_) => "container.blob_missing",
                ContainerError::Manifest(_) => "container.manifest_invalid",
                ContainerError::Checksum { .. } => "container.checksum",
                ContainerError::Shape { .. } => "container.shape_mismatch",
                ContainerError::MissingTensor(_) => "container.missing_tensor",
                ContainerError::Dtype(_) => "container.dtype",
            },
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad input data rather than by the computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Container(_)
                | Error::Record(_)
                | Error::Json(_)
                | Error::Io { .. }
                | Error::Vocab(_)
                | Error::InsufficientData(_)
        )
    }
}

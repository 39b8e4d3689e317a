use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic in {path}: 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("label out of range in {path}: record {record} has label {label}")]
    LabelOutOfRange {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("duplicate step {step} in {dir}")]
    DuplicateStep { dir: PathBuf, step: u64 },

    #[error("step {step} not found in {dir}")]
    StepNotFound { dir: PathBuf, step: u64 },

    #[error("no checkpoints in {0}")]
    EmptyStore(PathBuf),

    #[error("corrupt checkpoint {path}: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("malformed csv {path}: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InvalidConfig(_)
                | Error::DimensionMismatch { .. }
                | Error::ClassOutOfRange { .. }
                | Error::LengthMismatch { .. }
        )
    }
}

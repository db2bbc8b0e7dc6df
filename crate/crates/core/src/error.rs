use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported raster in {path}: {detail}")]
    UnsupportedRaster { path: PathBuf, detail: String },

    #[error("label out of range: pixel {index} has value {value} but only {classes} classes are defined")]
    LabelOutOfRange {
        index: usize,
        value: u8,
        classes: usize,
    },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("exact kernel capped at {cap} pixels (got {n})")]
    OracleTooLarge { n: usize, cap: usize },

    #[error("exhaustive search too large: {classes}^{points} labelings exceeds 2^20")]
    SearchTooLarge { classes: usize, points: usize },

    #[error("loss configuration enables no term")]
    EmptyLossConfig,

    #[error("non-finite {term} energy at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        term: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("cannot write image: {0}")]
    Encode(#[source] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        detail: detail.into(),
    }
}

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("dimension mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("insufficient valid pixels: need {needed}, have {available}")]
    InsufficientPixels { needed: usize, available: usize },

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("projection ({x:.3}, {y:.3}) falls outside the {width}x{height} frame")]
    OutOfFrame { x: f64, y: f64, width: usize, height: usize },

    #[error("kernel mismatch: {0}")]
    KernelMismatch(String),

    #[error("reach exceeds the {width}x{height} analysis grid, enlarge the grid")]
    ReachExceedsGrid { width: usize, height: usize },

    #[error("view {0} sees no scene geometry")]
    NoGeometry(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }
}

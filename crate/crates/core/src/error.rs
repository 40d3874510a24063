use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (|signed area| = {area:e})")]
    DegenerateTriangle { area: f64 },

    #[error("time {t} outside window [{start}, {end}]")]
    TimeOutOfWindow { t: f64, start: f64, end: f64 },

    #[error("point ({x}, {y}) lies outside the mesh")]
    OutsideMesh { x: f64, y: f64 },

    #[error("too few events: {got} events for {bins} bins")]
    TooFewEvents { got: usize, bins: usize },

    #[error("no event could be associated with the mesh")]
    NoAssociatedEvents,

    #[error("invalid sample density {0}; need at least 1 sample per edge")]
    InvalidSampleDensity(usize),

    #[error("point ({x}, {y}) outside the image")]
    OutOfImage { x: f64, y: f64 },

    #[error("sample vector has zero variance")]
    ZeroVariance,

    #[error("every triangle is textureless")]
    NoTexture,

    #[error("rigid stage diverged after {0} iterations")]
    RigidStageDiverged(usize),

    #[error("displacement tables do not line up: {0}")]
    TableMismatch(String),

    #[error("no surviving points")]
    NoSurvivors,

    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

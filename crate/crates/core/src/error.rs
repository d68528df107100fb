use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z_c = {z_c})")]
    PointBehindCamera { z_c: f64 },

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("pixel ray does not reach the ground plane")]
    NoGroundIntersection,

    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },

    #[error("homologous pair batch is empty")]
    EmptyBatch,

    #[error("grid specs differ")]
    SpecMismatch,

    #[error("scene has no objects")]
    NoObjects,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

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

    /// Wraps an error with the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input data rather than bad arguments.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Config(_) => false,
            Error::Stage { source, .. } => source.is_data_error(),
            _ => true,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("origin error: {0}")]
    Origin(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence {
        epoch: usize,
        loss: f64,
        partial: Option<Box<crate::train::TrainReport>>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

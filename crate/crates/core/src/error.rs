use std::path::PathBuf;

use crate::data::wav::WavError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("capability not available: {0}")]
    Capability(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("detection error rate undefined: reference contains no speech")]
    UndefinedRate,

    #[error("non-finite loss at epoch {epoch}, step {step}: L_v={vad_loss}, L_d={domain_loss:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        vad_loss: f64,
        domain_loss: Option<f64>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wav: {0}")]
    Wav(#[from] WavError),

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

    /// Errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Corpus(_)
                | Error::Wav(_)
                | Error::Io { .. }
        )
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("photon-number truncation exceeded: p(n_max={n_max}) = {tail:e}")]
    Truncated { n_max: usize, tail: f64 },

    #[error("integration unstable at t = {time:e} s: {reason}")]
    Unstable { time: f64, reason: String },

    #[error("fit refused: {0}")]
    FitRefused(String),

    #[error("fit did not converge after {evaluations} evaluations")]
    NotConverged { evaluations: usize },

    #[error("kernel pitch {kernel:e} m does not match signal pitch {signal:e} m")]
    PitchMismatch { kernel: f64, signal: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

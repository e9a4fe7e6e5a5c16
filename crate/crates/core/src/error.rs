use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} is below the schedule cutoff t_min = {t_min}")]
    TimestepBelowCutoff { t: f64, t_min: f64 },

    #[error("mean at time t has squared norm {0:e}; too small to estimate the mixing weight")]
    DegenerateMean(f64),

    #[error("non-finite parameters after round {round}")]
    NonFinite { round: usize },

    #[error("non-finite sampler state at step {step}")]
    SamplerDiverged { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

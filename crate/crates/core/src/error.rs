use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point {point:?} lies outside the closed {species} box")]
    OutOfDomain { species: &'static str, point: Vec<f64> },
    #[error("picard iteration did not converge after {iterations} iterations (last increment {increment:e})")]
    NonConvergence { iterations: usize, increment: f64 },
    #[error("solution went negative ({value:e}) at t = {time}; scheme fault")]
    Negativity { value: f64, time: f64 },
    #[error("requested horizon {requested} exceeds the contraction window T0 = {t0}; set override_horizon to proceed")]
    Horizon { requested: f64, t0: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

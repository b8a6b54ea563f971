use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside [0, {t_end}]")]
    TimeOutOfRange { t: f64, t_end: f64 },

    #[error("sigma {sigma} outside [0, {sigma_end}]")]
    SigmaOutOfRange { sigma: f64, sigma_end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("noise scaling is singular at t = 0")]
    SingularScaling,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("denoising score matching diverged at step {step}: loss = {loss}, batch size {batch}")]
    TrainingDiverged { step: usize, loss: f64, batch: usize },

    #[error("particle {particle} diverged at iteration {iteration}: {cause}")]
    ParticleDiverged {
        particle: usize,
        iteration: usize,
        cause: Box<Error>,
        /// Ensemble state at the moment of failure, before the update was committed.
        positions: Vec<Vec<f64>>,
    },

    #[error("density grid carries no mass")]
    EmptyGridMass,

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

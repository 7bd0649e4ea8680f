use thiserror::Error;

use crate::affine::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inputs whose shapes do not fit together.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("inadmissible model parameters: {0:?}")]
    Inadmissible(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Taylor coefficients of the Riccati system grew past the blow-up guard.
    #[error("riccati solution explodes at t = {at:.6} (coefficient magnitude {magnitude:e})")]
    RiccatiExplosion { at: f64, magnitude: f64 },

    #[error("innovation covariance is numerically singular (condition estimate {0:e})")]
    DegenerateObservation(f64),

    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),

    /// Every particle carries zero likelihood.
    #[error("total weight degeneracy at step {step}")]
    Degeneracy { step: usize },

    #[error("unsupported model regime: {0}")]
    UnsupportedRegime(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

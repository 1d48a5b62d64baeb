use thiserror::Error;

/// Errors raised by the physics layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("position z = {z} m lies outside the profile domain [{min}, {max}] m")]
    Domain { z: f64, min: f64, max: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("evanescent region: dispersion discriminant {discriminant} < 0")]
    Evanescent { discriminant: f64 },
    #[error("no turning point: {0}")]
    NoTurningPoint(String),
    #[error("carrier wavenumber {k} 1/m exceeds the grid Nyquist limit {nyquist} 1/m")]
    Nyquist { k: f64, nyquist: f64 },
    #[error("ray integration failed at t = {t} s: {reason}")]
    StepFailure { t: f64, reason: String },
    #[error("trajectory does not contain exactly one turning event (found {found})")]
    NoTurningEvent { found: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

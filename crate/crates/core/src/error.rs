use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("tau is not symmetric (max asymmetry {0:e})")]
    TauNotSymmetric(f64),
    #[error("imaginary part of tau is not positive definite")]
    TauNotPositive,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("precision unreachable: ellipsoid radius {radius} exceeds cap {cap}")]
    PrecisionUnreachable { radius: f64, cap: f64 },
    #[error("degenerate sample: normalizer {0:e} below threshold")]
    DegenerateSample(f64),
    #[error("pole: theta denominator {0:e} is numerically zero")]
    Pole(f64),
    #[error("point is not on the theta divisor (normalized |theta| = {0:e})")]
    NotOnDivisor(f64),
    #[error("degenerate jet: all jet rows vanish")]
    DegenerateJet,
    #[error("unsupported genus {0}")]
    UnsupportedGenus(usize),
}

impl Error {
    /// Stable machine-readable identifier used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::TauNotSymmetric(_) => "TAU_NOT_SYMMETRIC",
            Error::TauNotPositive => "TAU_NOT_POSITIVE",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::PrecisionUnreachable { .. } => "PRECISION_UNREACHABLE",
            Error::DegenerateSample(_) => "DEGENERATE_SAMPLE",
            Error::Pole(_) => "POLE",
            Error::NotOnDivisor(_) => "NOT_ON_DIVISOR",
            Error::DegenerateJet => "DEGENERATE_JET",
            Error::UnsupportedGenus(_) => "UNSUPPORTED_GENUS",
        }
    }

    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::TauNotSymmetric(_)
                | Error::TauNotPositive
                | Error::DimensionMismatch { .. }
                | Error::InvalidInput(_)
                | Error::UnsupportedGenus(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

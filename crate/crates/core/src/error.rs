use alloc::string::String;

/// Errors raised by the analysis core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "covariate dimension mismatch: unit {unit} has {found} covariates, expected {expected}"
    )]
    DimensionMismatch {
        unit: usize,
        expected: usize,
        found: usize,
    },

    #[error(
        "sample covariance matrix is singular; drop collinear covariates or supply a ridge term"
    )]
    SingularCovariance,

    #[error("not enough controls: {controls} controls for {treated} treated units")]
    NotEnoughControls { treated: usize, controls: usize },

    #[error("invalid matched design: {0}")]
    InvalidDesign(String),

    #[error("degenerate scale: every within-set outcome difference is zero")]
    DegenerateScale,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error(
        "matched set {set} has {size} units; exact weights are limited to sets of at most {max}"
    )]
    SetTooLarge { set: usize, size: usize, max: usize },

    #[error("invalid sensitivity specification: {0}")]
    InvalidSpec(String),

    #[error("empty matched design")]
    EmptyDesign,

    #[error("exact enumeration too large ({0}); use the gaussian or monte-carlo method")]
    EnumerationTooLarge(String),
}

pub type Result<T> = core::result::Result<T, Error>;

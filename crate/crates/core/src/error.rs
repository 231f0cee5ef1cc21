use thiserror::Error;

use crate::regularize::ApproximateMinimizer;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("coefficient is not admissible: min nodal value {min} < bound {bound}")]
    NonAdmissibleCoefficient { min: f64, bound: f64 },

    #[error("assembled system is not positive definite (pivot {pivot} at row {row})")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("value {0} outside the open interval (0, 1)")]
    OutOfRange(f64),

    #[error("perturbation amplitude {amplitude} exceeds admissibility margin {margin}")]
    NonAdmissiblePerturbation { amplitude: f64, margin: f64 },

    #[error("training images are linearly dependent ({0})")]
    DependentImages(String),

    #[error("rescaled product {value} at node {node} leaves (0, 1)")]
    RangeViolation { node: usize, value: f64 },

    #[error("least-squares fit is ill-conditioned (condition number {0:e})")]
    IllConditionedFit(f64),

    #[error("probe set is empty")]
    EmptyProbeSet,

    #[error("mollification width {0} must lie in (0, 0.5)")]
    WidthTooLarge(f64),

    #[error("mollification property violated at xi = {xi}: {what}")]
    PropertyViolation { xi: f64, what: String },

    #[error("parameter choice needs max(delta, rho) > 0")]
    DegenerateScale,

    #[error("line search stalled after {halvings} halvings at iteration {}", .best.certificate.iterations)]
    Stalled {
        halvings: usize,
        best: Box<ApproximateMinimizer>,
    },

    #[error("iteration limit reached (eta bound {:e})", .best.certificate.eta_bound)]
    MaxIterations { best: Box<ApproximateMinimizer> },

    #[error("slope fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by bad input as opposed to a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::ConfigInvalid(_)
                | Error::Parse(_)
                | Error::OutOfRange(_)
                | Error::WidthTooLarge(_)
                | Error::DegenerateScale
                | Error::NonAdmissiblePerturbation { .. }
                | Error::EmptyProbeSet
                | Error::Io(_)
        )
    }
}

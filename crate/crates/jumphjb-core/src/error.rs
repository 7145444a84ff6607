//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors surfaced by simulation, regression, and grid solvers.
///
/// Variants are grouped by failure class so a caller can map them onto
/// process exit codes: configuration problems are caught before any
/// numerics run, numerical failures carry enough context to locate the
/// offending step, and budget overruns report the requested size.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A sampling or integration interval with `t1 < t0`.
    #[error("invalid interval: t0 = {t0}, t1 = {t1}")]
    InvalidInterval { t0: f64, t1: f64 },

    /// The regression normal equations stayed singular after the ridge
    /// fallback; reports the backward step at which the basis degenerated.
    #[error("ill-conditioned regression basis at backward step {step}")]
    IllConditionedBasis { step: usize },

    /// A state, cost, or field value left the representable range.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Open-loop enumeration would exceed the configured budget.
    #[error("enumeration of {requested} control sequences exceeds budget {budget}")]
    EnumerationTooLarge { requested: u128, budget: u128 },

    /// The explicit time step violates the stability bound.
    #[error("time step {dt} exceeds stability bound {required}")]
    StepTooLarge { dt: f64, required: f64 },

    /// A jump displacement left the grid box and its extrapolation collar.
    #[error("displaced point {point:?} leaves the grid box and collar")]
    DomainTooSmall { point: Vec<f64> },

    /// The diffusion matrix lost uniform ellipticity on the probe set.
    #[error("diffusion matrix is not uniformly elliptic: min eigenvalue {min_eig}")]
    NotElliptic { min_eig: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

//! Numerical toolkit for controlled jump diffusions with recursive costs.
//!
//! The state follows a controlled SDE driven by a Brownian motion and a
//! compensated Poisson random measure with finitely many mark atoms; the
//! cost is recursive, defined through a backward equation with jumps. The
//! crate simulates the forward equation, solves the backward equation by
//! regression Monte Carlo, estimates value functions through the backward
//! semigroup, solves the deterministic-coefficient HJB integro-PDE on a
//! grid, and provides the approximation toolkit (mollification, error
//! envelopes, Lyapunov and penalty functions, finite noise projections)
//! that turns the underlying estimates into executable checks.

pub mod approx;
pub mod bsde;
pub mod coefficients;
pub mod error;
pub mod fields;
pub mod forward_sim;
pub mod history;
pub mod integro_pde;
pub mod mark_measure;
pub mod regression;
pub mod rng;
pub mod value_dpp;

pub use approx::{
    BoundingConstants, CoefficientErrors, LyapunovReport, MollifierSpec, NoiseProjection,
    PenaltyEval, ProjectionErrorRow,
};
pub use coefficients::{CoefficientSet, TestField};
pub use error::{Error, Result};
pub use fields::{MarkField, ScalarField, VectorField};
pub use forward_sim::{PathBundle, TimeGrid};
pub use history::NoiseHistory;
pub use integro_pde::{GridField, PdeSolution, SpaceGrid};
pub use mark_measure::{JumpRecord, MarkAtom, MarkMeasure};

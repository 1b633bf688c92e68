//! Numerical certification of alternating minimization between experts and
//! routers.
//!
//! [`quadratic`] checks the contraction of exact alternation on a strictly
//! convex quadratic. [`decoupled`] implements linear experts with a softmax
//! router relaxed through a KL penalty, with exact block solvers;
//! [`curvature`] verifies the joint strong-convexity condition and
//! [`rate`] checks the resulting linear rate on the objective residual.
//! [`suite`] runs all of these over seeded random instances.

pub mod curvature;
pub mod decoupled;
mod error;
pub mod quadratic;
pub mod rate;
pub mod suite;

pub use error::{Error, Result};

//! Stochastic model predictive control for nonlinear systems with unbounded
//! additive noise.
//!
//! Offline, a constant contraction metric is designed by semidefinite
//! programming and turned into probabilistic reachable sets, tightened state
//! constraints and terminal ingredients. Online, an indirect-feedback MPC
//! imposes the tightened constraints on a noise-free nominal state while the
//! measured state only enters the cost.

pub mod error;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod ocp;
pub mod prs;
pub mod qp;
pub mod metric;
pub mod sdp;
pub mod shrinking;
pub mod smpc;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

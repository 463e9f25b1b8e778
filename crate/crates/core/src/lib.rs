//! Numerical laboratory for continuous-state branching processes (with
//! immigration) in Lévy random environments.
//!
//! Two engines compute the same laws independently:
//!
//! * the backward engine ([`cumulant`]) solves the random cumulant equations
//!   along a fixed environment path;
//! * the forward engine ([`forward_sim`]) simulates the stochastic equations
//!   by an Euler scheme with Poisson thinning.
//!
//! [`laws`] compares the two with Monte Carlo standard errors.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cumulant;
pub mod environment;
pub mod error;
pub mod forward_sim;
pub mod laws;
pub mod measures;
pub mod mechanisms;
mod quadrature;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

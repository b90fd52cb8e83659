//! Simulation core for single-loop federated actor-critic on heterogeneous
//! tabular MDPs.
//!
//! A family of agents holds structurally identical but quantitatively
//! different environments. Policy evaluation is federated TD(0) with linear
//! features ([`critic`]), policy improvement is one averaged softmax
//! policy-gradient step per outer round ([`actor`]), and [`driver`] ties the
//! two into the single-loop scheme in which the critic iterate is carried
//! across outer rounds instead of being re-solved from scratch. Everything
//! the samplers estimate has a closed-form counterpart in [`oracles`], which
//! the test suite uses as ground truth.
//!
//! The crate is `no_std` (with `alloc`) so the simulation core stays free of
//! IO concerns; the companion CLI crate owns files, configs, and plots.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub use nalgebra as na;

pub mod actor;
pub mod critic;
pub mod driver;
pub mod error;
pub mod mdp;
pub mod oracles;
pub mod sampling;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

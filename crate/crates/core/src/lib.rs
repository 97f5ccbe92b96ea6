//! Penalized policy iteration for continuous-time stochastic control.
//!
//! Each iterate freezes the policy at the previous `Z` and solves a
//! linear-quadratic problem whose value has the closed form
//! `phi(n) log E[exp(F^n / phi(n))]` under a Girsanov-tilted measure. The
//! crate evaluates it by Monte Carlo on path ensembles ([`lsmc`]) or on a
//! 1-D grid through the Cole-Hopf transform ([`pde`]), and drives the
//! iteration with error tracking in [`driver`].

pub mod error;
pub mod bench;
pub mod driver;
pub mod lsmc;
pub mod paths;
pub mod pde;
pub mod problem;
pub mod regression;
pub mod report;

pub use error::{PiaError, Result};

/// Crate version, recorded in report envelopes.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

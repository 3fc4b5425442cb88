//! Time-to-accident (TTA) risk modeling for automated driving.
//!
//! * [`risk_metrics`]: TTC/TTA measurement, self-information, risk entropy,
//!   Shannon entropy of state counts.
//! * [`state_space`]: discretization of the TTA axis into risk states.
//! * [`markov_model`]: ideal, modified and extended transition matrices.
//! * [`exit_analysis`]: accident probability and exit time solvers, plus a
//!   Monte Carlo oracle.
//! * [`sim`]: frame-stepped car-following simulator.
//! * [`config`], [`formats`], [`cli`]: the `ttarisk` command-line harness.

pub mod cli;
pub mod config;
pub mod error;
pub mod exit_analysis;
pub mod formats;
pub mod markov_model;
pub mod risk_metrics;
pub mod sim;
pub mod state_space;

pub use error::{Error, Result};

//! Binary classifiers that come with actionable recourse.
//!
//! The pipeline: load and standardize a tabular dataset ([`data`]), describe
//! the permissible actions ([`action`]), train a tanh network with a
//! recourse term solved by a linear program per example ([`train`], [`lp`]),
//! compute recourse for individuals ([`recourse`]), and pick a decision
//! threshold with a PAC guarantee that recourse exists ([`calibration`]).
//! [`eval`] holds the metrics and experiment protocols.

pub mod action;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lp;
pub mod metrics;
pub mod nn;
pub mod recourse;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

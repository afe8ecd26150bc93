//! Mean-field queueing with sparse integer service times: the single-server
//! non-linear Markov process, its stationary behaviour, a multi-level
//! transience construction, and a finite-network simulator.

pub mod error;
pub mod flow;
pub mod cli;
pub mod equilibrium;
pub mod initial;
pub mod meanfield;
pub mod measure;
pub mod service;
pub mod transience;

pub use error::{Error, Result};
pub use flow::{nmp_run, nmp_step, EngineConfig, RateTrace, Server};
pub use measure::{Rectangle, StateMeasure, Truncation};
pub use service::{ServiceDistribution, TypeBSpec};

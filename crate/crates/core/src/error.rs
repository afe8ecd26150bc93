use std::path::PathBuf;

use thiserror::Error;

use crate::initial::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid service spec: {0}")]
    InvalidSpec(String),

    #[error("block {block}: no atom selected")]
    EmptyBlock { block: usize },

    #[error("block {block}: atom {atom} outside [{start}, {end}]")]
    AtomOutOfRange {
        block: usize,
        atom: u64,
        start: u64,
        end: u64,
    },

    #[error("atoms must be strictly increasing: {prev} then {next}")]
    NonIncreasing { prev: u64, next: u64 },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: String },

    #[error("conditioning event {what} has zero mass")]
    ZeroMass { what: String },

    #[error("negative arrival rate {rate} at t={t}")]
    NegativeRate { rate: f64, t: usize },

    #[error("hazard table ends at tau={max_tau}, measure has mass at tau={tau}")]
    HazardTable { tau: u64, max_tau: u64 },

    #[error("conservation budget exceeded at t={t}: cumulative drift {drift:e} > {budget:e}")]
    ConservationBudget { t: usize, drift: f64, budget: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("level {level}: search exhausted ({detail})")]
    SearchExhausted { level: usize, detail: String },

    #[error("geometry violations: {}", format_violations(.0))]
    Geometry(Vec<Violation>),

    #[error("weights: {0}")]
    Weights(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergent sequence: {0}")]
    Divergent(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {fire_time} but clock is already at {now}")]
    ScheduledInPast { fire_time: SimTime, now: SimTime },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("no exit relay allows port {0}")]
    NoExitForPort(u16),
    #[error("no eligible guard relay")]
    NoGuard,
    #[error("no eligible middle relay")]
    NoMiddle,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CircuitError {
    #[error("illegal circuit transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: crate::circuit::CircuitState,
        to: crate::circuit::CircuitState,
    },
    #[error("circuit has no RTT measurements yet")]
    Unmeasured,
    #[error("RTT samples must be positive")]
    NonPositiveSample,
    #[error("circuit is not open or dirty")]
    NotMeasurable,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("relay {0} has non-positive bandwidth")]
    ZeroBandwidth(u32),
    #[error("exit relay {0} has an empty exit policy")]
    EmptyExitPolicy(u32),
    #[error("invalid position ({lat}, {lon}) for {what}")]
    InvalidPosition { what: String, lat: f64, lon: f64 },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("host {0} is not mapped to any AS")]
    UnmappedHost(String),
    #[error("no route from AS {from} to AS {to}")]
    NoRoute { from: u32, to: u32 },
    #[error("unknown AS {0} in topology")]
    UnknownAs(u32),
    #[error("invalid adversary configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Errors surfaced by the experiment harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems exit with a distinct status from runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

// SPDX-License-Identifier: Apache-2.0

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no transmission peak found in band")]
    NoPeakFound,

    #[error("{count} transmission peaks exceed half of the global maximum")]
    MultiplePeaks { count: usize },

    #[error("bias current {current:.6e} A reaches the critical current {critical:.6e} A")]
    CriticalCurrentExceeded { current: f64, critical: f64 },

    #[error("target shift {target:.6e} Hz is beyond the reachable shift {max:.6e} Hz")]
    TargetUnreachable { target: f64, max: f64 },

    #[error("fit diverged: {0}")]
    FitDiverged(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("required slew {required:.3e} Hz/s exceeds the bias-circuit limit {limit:.3e} Hz/s")]
    SlewTooFast { required: f64, limit: f64 },

    #[error("integration step too large: dt*|Omega| = {0:.4} rad (limit 0.1)")]
    StepTooLarge(f64),

    #[error("timing violation: {0}")]
    TimingViolation(String),

    #[error("compensation schedule does not fit: {0}")]
    DoesNotFit(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with any context wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Drive power above the linear-regime cap of the current bias state.
    PowerCapExceeded { power_dbm: f64, cap_dbm: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::PowerCapExceeded { power_dbm, cap_dbm } => write!(
                f,
                "drive power {power_dbm} dBm exceeds the linear-regime cap {cap_dbm} dBm"
            ),
        }
    }
}

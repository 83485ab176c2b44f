use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feeder topology: {0}")]
    Topology(String),

    #[error("line {index} ({from}->{to}) has nonpositive impedance r={r}, x={x}")]
    Impedance {
        index: usize,
        from: usize,
        to: usize,
        r: f64,
        x: f64,
    },

    #[error("DER record {index} at bus {bus}: {reason}")]
    InvalidDer { index: usize, bus: usize, reason: String },

    #[error("sensitivity matrix {0} is not positive definite (smallest eigenvalue {1:e})")]
    NotPositiveDefinite(&'static str, f64),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("invalid {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error(
        "Volt/VAR dynamics did not converge in {iterations} iterations (last residual {:e})",
        residuals.last().copied().unwrap_or(f64::NAN)
    )]
    Divergence {
        iterations: usize,
        /// `‖q^{t+1} − q^t‖₂` for every step taken.
        residuals: Vec<f64>,
    },

    #[error("unknown {what} `{name}` (expected one of: {expected})")]
    UnknownName {
        what: &'static str,
        name: String,
        expected: &'static str,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("projection infeasible: {0}")]
    Infeasible(String),

    #[error("AC power flow did not converge after {sweeps} sweeps (mismatch {:e})", mismatches.last().copied().unwrap_or(f64::NAN))]
    AcNonConvergence { sweeps: usize, mismatches: Vec<f64> },

    #[error("voltage collapse at bus {bus}: |v| = {magnitude}")]
    VoltageCollapse { bus: usize, magnitude: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}, line {line}: {message}")]
    Parse { context: String, line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::NonFinite { .. }
                | Error::Infeasible(_)
                | Error::AcNonConvergence { .. }
                | Error::VoltageCollapse { .. }
                | Error::NotPositiveDefinite(..)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

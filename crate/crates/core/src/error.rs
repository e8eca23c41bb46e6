use std::path::PathBuf;

use thiserror::Error;

use crate::month::MonthKey;
use crate::panel::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series {series} does not cover {}", format_months(.missing))]
    Coverage { series: String, missing: Vec<MonthKey> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid series {series}: {reason}")]
    InvalidSeries { series: String, reason: String },

    #[error("invalid study design: {0}")]
    InvalidDesign(String),

    #[error("panel validation failed:\n{0}")]
    Validation(ValidationReport),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown series id requested: {0}")]
    UnknownSeries(String),

    #[error("{0}")]
    Structural(String),

    #[error(
        "solver did not converge after {iterations} iterations \
         (kkt residual {kkt_residual:.3e}, objective {objective:.6e})"
    )]
    NonConvergence {
        iterations: usize,
        kkt_residual: f64,
        objective: f64,
        best_weights: Vec<f64>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 data/config, 2 solver non-convergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Coverage { .. } => "coverage",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidSeries { .. } => "invalid_series",
            Error::InvalidDesign(_) => "invalid_design",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::UnknownSeries(_) => "unknown_series",
            Error::Structural(_) => "structural",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Io { .. } => "io",
        }
    }
}

fn format_months(months: &[MonthKey]) -> String {
    const SHOWN: usize = 6;
    let mut parts: Vec<String> = months.iter().take(SHOWN).map(|m| m.to_string()).collect();
    if months.len() > SHOWN {
        parts.push(format!("... ({} months total)", months.len()));
    }
    parts.join(", ")
}

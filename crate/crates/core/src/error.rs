use std::path::PathBuf;

use crate::geometry::RigidTransform;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A NIfTI header field failed validation.
    #[error("malformed NIfTI header field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported NIfTI datatype code {0} (supported: uint8, int16, int32, float32, float64)")]
    UnsupportedDatatype(i16),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Registration did not find a usable alignment. `best` is the best
    /// transform seen before giving up.
    #[error("registration failed: {reason}")]
    Registration {
        reason: String,
        best: RigidTransform,
    },

    #[error("EM did not converge after {} iterations (last log-likelihood {:?})", trace.len(), trace.last())]
    Convergence { trace: Vec<f64> },

    #[error("design error: {0}")]
    Design(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{}", format_issues("configuration error(s)", .0))]
    Config(Vec<String>),

    /// A run directory already exists; nothing was written.
    #[error("run directory {0} already exists; choose a distinct run_id")]
    RunExists(PathBuf),

    /// One or more inputs named in a batch list could not be loaded.
    #[error("{}", format_issues("batch input(s) failed to load", .0))]
    Batch(Vec<String>),
}

fn format_issues(what: &str, issues: &[String]) -> String {
    let mut s = format!("{} {what}:", issues.len());
    for issue in issues {
        s.push_str("\n  - ");
        s.push_str(issue);
    }
    s
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            field,
            reason: reason.into(),
        }
    }
}

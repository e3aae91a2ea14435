use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("grid_model: invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("grid_model: network is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("powerflow: no convergence after {iterations} iterations (max mismatch {mismatch:.3e})")]
    NonConvergence { iterations: usize, mismatch: f64 },

    #[error("dataset: {discards} of {candidates} candidate seeds failed (power flow or labeling), above the discard budget")]
    DiscardBudget { discards: usize, candidates: u64 },

    #[error("{context}: singular or ill-conditioned matrix (condition estimate {condition:.3e})")]
    Singular { context: &'static str, condition: f64 },

    #[error("{context}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("wls_se: measurement ordering inconsistent with placement at phasor {index}: {reason}")]
    InconsistentOrdering { index: usize, reason: String },

    #[error("factor_graph: encoding width {width} cannot index {count} variable nodes")]
    EncodingWidth { width: usize, count: usize },

    #[error("factor_graph: unknown phasor id {0}")]
    UnknownPhasor(usize),

    #[error("neural: parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("trainer: divergence (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("system digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("labeling failed at sample {index}: {source}")]
    Labeling {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::Singular { .. }
            | Error::Divergence { .. }
            | Error::DiscardBudget { .. } => true,
            Error::Labeling { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

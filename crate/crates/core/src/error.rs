use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A configuration value violates its invariant; `field` names it.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    /// Cached state does not line up with the requested computation.
    #[error("state alignment error at layer {layer}, position {position}: {reason}")]
    Alignment {
        layer: usize,
        position: usize,
        reason: String,
    },

    /// An operation would undo work already committed by the full model.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sequence capacity exceeded: need {required} positions, backend holds {capacity}")]
    Capacity { required: usize, capacity: usize },

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn alignment(layer: usize, position: usize, reason: impl Into<String>) -> Self {
        Error::Alignment {
            layer,
            position,
            reason: reason.into(),
        }
    }
}

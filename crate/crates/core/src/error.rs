use std::fmt;

/// Which half of a bursty context could not be filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSide {
    Verb,
    Noun,
    /// Unconstrained (random-mode) sampling.
    Any,
}

impl fmt::Display for MatchSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchSide::Verb => "verb",
            MatchSide::Noun => "noun",
            MatchSide::Any => "any",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("context infeasible: {available} {side}-match candidates, {required} required")]
    ContextInfeasible {
        side: MatchSide,
        available: usize,
        required: usize,
    },

    #[error("dataset construction failed: {0}")]
    DatasetConstruction(String),

    #[error("sequence requires {required} positions, max_seq_len is {max}")]
    Assembly { required: usize, max: usize },

    #[error("non-finite values in {0}")]
    NumericFailure(String),

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingFailure { step: usize, loss: f64 },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by user configuration rather than a failing stage.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

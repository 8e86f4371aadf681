use std::fmt;

use thiserror::Error;

/// Problems found while validating an [`AuditConfig`](crate::model::AuditConfig).
///
/// Validation keeps going after the first failure so a single run reports
/// every problem in the document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    pub fn single(problem: impl Into<String>) -> Self {
        Self {
            problems: vec![problem.into()],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.problems.join("; "))
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("budget exhausted: {variants} prompt variants cannot share {budget} images")]
    BudgetExhausted { variants: usize, budget: usize },

    #[error("backend error: {0}")]
    Backend(#[from] crate::backends::BackendError),

    #[error("empty distribution for axis `{axis}`{context}")]
    EmptyDistribution { axis: String, context: String },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach intervened/measured axis context to an empty-distribution error.
    pub fn with_pair_context(self, intervened: &str, measured: &str) -> Self {
        match self {
            Error::EmptyDistribution { axis, .. } => Error::EmptyDistribution {
                axis,
                context: format!(" (intervened `{intervened}`, measured `{measured}`)"),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::IdxError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Engine(#[from] trady_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("epoch {epoch}: selection uses {slots} slots, over the budget of {budget}")]
    BudgetViolation { epoch: usize, slots: usize, budget: usize },

    #[error("{path}: malformed CSV: {reason}")]
    Csv { path: PathBuf, reason: String },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

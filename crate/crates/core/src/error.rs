use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TameError>;

#[derive(Debug, Error)]
pub enum TameError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("buffer is empty: {0}")]
    EmptyBuffer(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<TameError>,
    },
}

impl TameError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TameError::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        TameError::Format(msg.into())
    }
}

/// Attaches the name of the pipeline stage that produced an error.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| TameError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DppcaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown group label `{label}`; available labels: {available:?}")]
    UnknownGroup { label: String, available: Vec<String> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("input is not column-centered (max |column mean| = {max_abs_mean:e})")]
    NotCentered { max_abs_mean: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("persistence parameter {phi} is outside the stationary region (-1, 1)")]
    NonStationary { phi: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("time point {time}: {source}")]
    AtTime {
        time: usize,
        #[source]
        source: Box<DppcaError>,
    },

    #[error("sweep {sweep}: {source}")]
    AtSweep {
        sweep: usize,
        #[source]
        source: Box<DppcaError>,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DppcaError>,
    },

    #[error("too few samples: need at least {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DppcaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DppcaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DppcaError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn at_time(self, time: usize) -> Self {
        DppcaError::AtTime {
            time,
            source: Box::new(self),
        }
    }

    pub fn at_sweep(self, sweep: usize) -> Self {
        DppcaError::AtSweep {
            sweep,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        DppcaError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True when the error (or the error it wraps) comes from configuration validation.
    pub fn is_config(&self) -> bool {
        match self {
            DppcaError::Config { .. } => true,
            DppcaError::Stage { source, .. }
            | DppcaError::AtTime { source, .. }
            | DppcaError::AtSweep { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, DppcaError>;

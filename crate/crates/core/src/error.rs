//! Crate-wide error type.
//!
//! Recoverable failures (bad data files, invalid configs, numeric blow-ups)
//! are reported through [`Error`]. Programmer errors such as indexing a layer
//! that does not exist panic instead.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced by layer {layer} during the forward pass")]
    NonFiniteForward { layer: usize },

    #[error("non-finite loss at inner adaptation step {step}")]
    NonFiniteInner { step: usize },

    #[error("non-finite loss observation during weight update")]
    NonFiniteObservation,

    #[error("label {label} out of range for {n_classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        n_classes: usize,
        row: usize,
    },

    #[error("empty batch in {context}")]
    EmptyBatch { context: &'static str },

    #[error("class {local_class} has no support examples")]
    EmptySupportClass { local_class: usize },

    #[error("multi-task weights must be strictly positive and finite, got {value} at index {index}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("cannot renormalize a weight vector with zero norm")]
    ZeroWeightNorm,

    #[error("gain schedule index must be at least 1, got {n}")]
    GainIndexZero { n: u64 },

    #[error("per-class partial losses are required for coarse weighting but were not computed")]
    MissingPartials,

    #[error("second-order meta-gradient requested but the adaptation tape was not retained")]
    MissingTape,

    #[error("split '{split}' has {available} classes but the episode needs {needed}")]
    SplitTooSmall {
        split: String,
        available: usize,
        needed: usize,
    },

    #[error("class {class_id} has {available} examples but the episode needs {needed}")]
    ClassTooSmall {
        class_id: usize,
        available: usize,
        needed: usize,
    },

    #[error("class {class_id} appears in more than one split")]
    OverlappingSplits { class_id: usize },

    #[error("{path}:{line}: {message}")]
    DataFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset manifest error in {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("invalid generator parameters: {0}")]
    Generator(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory {dir} has no recorded weight trajectory")]
    MissingTrajectory { dir: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite sample in channel {channel} ({name}) of {context}")]
    NonFinite {
        channel: usize,
        name: String,
        context: String,
    },

    #[error("cutoff {cutoff_hz} Hz is at or above the Nyquist frequency {nyquist_hz} Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },

    #[error(
        "window of {window_sec} s ({window_samples} samples) exceeds the recording \
         length of {samples} samples; P = 0"
    )]
    WindowTooLong {
        window_sec: f64,
        window_samples: usize,
        samples: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("requested {requested} negatives per anchor but only {available} are available")]
    NotEnoughNegatives { requested: usize, available: usize },

    #[error("no active loss terms: patch- and sequence-level alignment are both disabled")]
    NoActiveLossTerms,

    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch_id})")]
    TrainDiverged {
        epoch: usize,
        step: usize,
        batch_id: String,
    },

    #[error("label {label} outside [0, {n_classes})")]
    LabelOutOfRange { label: i64, n_classes: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("subject-independent split requires at least 5 distinct subjects, found {found}")]
    TooFewSubjects { found: usize },

    #[error("size mismatch for {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: String,
        expected: u64,
        found: u64,
    },

    #[error("unknown modality tag {tag:?} in {context}")]
    UnknownModality { tag: String, context: String },

    #[error("unsupported version {found:?} (supported: {supported:?})")]
    UnsupportedVersion { found: String, supported: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration (CLI exit code 1);
    /// everything else is a runtime failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::TrainDiverged { .. } | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

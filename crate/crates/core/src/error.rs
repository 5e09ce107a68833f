use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("spatial dims {dims:?} must be divisible by {required} ({factor}^{exponent})")]
    Indivisible { dims: [usize; 3], required: usize, factor: usize, exponent: u32 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("phantom placement failed after {attempts} attempts; try a larger volume than {shape:?}")]
    Placement { attempts: usize, shape: [usize; 3] },

    #[error("malformed MetaImage header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported MetaImage element type `{0}`")]
    UnsupportedElementType(String),

    #[error("payload size mismatch for {path}: expected {expected} bytes, found {actual}")]
    PayloadSize { path: PathBuf, expected: u64, actual: u64 },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    Diverged { step: usize, epoch: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }

    pub(crate) fn mismatch(op: &'static str, left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Error {
        Error::ShapeMismatch { op, left: format!("{left:?}"), right: format!("{right:?}") }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: input is empty")]
    Empty { op: &'static str },
    #[error("{op}: expected a spike tensor, found value {value} at index {index}")]
    NotBinary {
        op: &'static str,
        index: usize,
        value: f64,
    },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

/// Malformed configuration text or inconsistent hyperparameters.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {text:?}: {reason}")]
    Line {
        line: usize,
        text: String,
        reason: String,
    },
    #[error("{key}: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint is malformed: {0}")]
    Format(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name} missing from checkpoint")]
    Missing { name: String },
    #[error("checkpoint has unexpected tensor {name}")]
    Unexpected { name: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX file ({reason})")]
    Truncated { path: PathBuf, reason: String },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("bad data spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("image: {0}")]
    Image(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("firing rate {rate} of layer {layer} lies outside [0, 1]")]
    RateRange { layer: String, rate: f64 },
    #[error("unknown layer kind {0:?}")]
    UnknownKind(String),
    #[error("probe set is empty")]
    EmptyProbe,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loss became {loss} at epoch {epoch}, step {step}; diagnostics in {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        dump: PathBuf,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

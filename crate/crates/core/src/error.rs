use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CapelError> = std::result::Result<T, E>;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum CapelError {
    #[error("vector norm {norm:e} is at or below the zero threshold{context}")]
    ZeroNorm { norm: f64, context: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("cannot choose {k} items from a population of {population}")]
    ChooseTooMany { k: usize, population: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (reader supports {supported})")]
    BadVersion { found: u32, supported: u32 },
    #[error("unknown header flags {0:#x}")]
    BadFlags(u32),
    #[error("size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("row {row} has norm {norm} outside [1-1e-3, 1+1e-3]")]
    NormOutOfRange { row: usize, norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("prompt bank is ragged: class {class:?} has {found} prompts, expected {expected}")]
    RaggedBank {
        class: String,
        expected: usize,
        found: usize,
    },
    #[error("prompt {index} of class {class:?} is empty")]
    EmptyPrompt { class: String, index: usize },
    #[error("prompt bank has no classes or no prompts")]
    EmptyBank,
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid prune count {m} for K={k}")]
    InvalidM { m: usize, k: usize },
    #[error("true-class pc scope needs labels")]
    MissingLabels,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: ce={ce} pc={pc}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ce: f64,
        pc: f64,
    },
    #[error("could not place cluster centers for class {class} within {draws} draws")]
    RejectionExhausted { class: usize, draws: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl CapelError {
    pub(crate) fn zero_norm(norm: f64, context: impl Into<String>) -> Self {
        CapelError::ZeroNorm {
            norm,
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CapelError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error signals a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            CapelError::NonFiniteLoss { .. } | CapelError::NonFinite(_)
        )
    }
}

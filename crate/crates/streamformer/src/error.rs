//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes; names both shapes so the failing call is
    /// identifiable from the message alone.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structurally invalid argument (even kernel width, zero chunk, ...).
    #[error("{op}: {msg}")]
    Config { op: &'static str, msg: String },

    /// A softmax row where every position is masked out. A query that can
    /// attend to nothing is a topology bug, never a numeric edge case.
    #[error("softmax: row {row} is fully masked (degenerate attention row)")]
    DegenerateMaskRow { row: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tape is empty")]
    EmptyTape,

    #[error("finite_diff_check: two forward evaluations disagree, function is not deterministic")]
    NonDeterministic,

    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes at frame {frame}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        frame: usize,
    },

    /// Aggregated model-config violations, one message per offending field.
    #[error("invalid model config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("training aborted: non-finite loss at step {step} (global parameter norm {param_norm:.6e})")]
    NanLoss { step: u64, param_norm: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed binary or text file (bad magic, truncation, version skew,
    /// shape disagreement, unknown config key).
    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },
}

impl Error {
    pub fn config(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            op,
            msg: msg.into(),
        }
    }

    pub fn file(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

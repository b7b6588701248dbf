//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

/// Exit code classes for the command-line tool.
///
/// 0 = success, 1 = usage error, 2 = data/format error, 3 = numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage,
    Data,
    Numeric,
}

impl ExitClass {
    pub fn code(self) -> u8 {
        match self {
            ExitClass::Usage => 1,
            ExitClass::Data => 2,
            ExitClass::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum NluError {
    // ── shape / graph errors ─────────────────────────────────────────────
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("softmax: all positions masked in one lane, distribution undefined")]
    DegenerateSoftmax,

    #[error("cross-entropy: target index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("backward: loss tensor has {len} elements, expected a scalar")]
    NonScalarLoss { len: usize },

    // ── tokenizer / vocabulary errors ────────────────────────────────────
    #[error("vocab {path}: {reason}")]
    BadVocab { path: String, reason: String },

    #[error("token id {id} out of range for vocabulary of {size} entries (position {pos})")]
    TokenIdOutOfRange { id: usize, size: usize, pos: usize },

    #[error(
        "utterance \"{preview}\": {pieces} sub-tokens (with [CLS]/[SEP]) exceed max_seq_len {max}"
    )]
    UtteranceTooLong {
        preview: String,
        pieces: usize,
        max: usize,
    },

    // ── dataset errors ───────────────────────────────────────────────────
    #[error("{path}: {reason}")]
    BadData { path: String, reason: String },

    #[error("{path} line {line}: word count {words} != slot tag count {tags}")]
    TagCountMismatch {
        path: String,
        line: usize,
        words: usize,
        tags: usize,
    },

    #[error("{path} line {line}: malformed slot tag \"{tag}\" (expected O, B-<type> or I-<type>)")]
    MalformedTag {
        path: String,
        line: usize,
        tag: String,
    },

    // ── config / checkpoint errors ───────────────────────────────────────
    #[error("config {path} line {line}: {reason}")]
    BadConfig {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },

    // ── numeric failures ─────────────────────────────────────────────────
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("non-finite value while {context}")]
    NonFinite { context: String },

    #[error("gradient check failed: max rel err {max_rel_err:.3e} at {param} (threshold {threshold:.1e})")]
    GradCheckFailed {
        param: String,
        max_rel_err: f64,
        threshold: f64,
    },

    // ── plumbing ─────────────────────────────────────────────────────────
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl NluError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        NluError::Io {
            context: context.into(),
            source,
        }
    }

    /// Which exit code class this error belongs to.
    pub fn exit_class(&self) -> ExitClass {
        use NluError::*;
        match self {
            Usage(_) => ExitClass::Usage,
            DegenerateSoftmax
            | NonFiniteLoss { .. }
            | NonFinite { .. }
            | GradCheckFailed { .. } => ExitClass::Numeric,
            // Shape and label errors surface bad tensors or bad ids, which at the
            // CLI boundary always trace back to inconsistent data or config.
            _ => ExitClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, NluError>;

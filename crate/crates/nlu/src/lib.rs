//! Joint intent detection and slot filling, built from scratch for CPU-scale
//! experiments.
//!
//! The pipeline: wordpiece tokenization with word/sub-token alignment, a small
//! trainable transformer encoder, attention adapters that pool multi-piece
//! words into single word representations and summarize the utterance for
//! intent classification, joint decoding, and span-level evaluation. Training
//! runs on plain `f64` with tape-based reverse-mode autodiff; every gradient
//! path is verifiable against finite differences.

pub mod adapters;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod wordpiece;

pub use error::{ExitClass, NluError, Result};

//! Adaptive self-training for few-shot neural sequence labeling.
//!
//! The crate bundles everything needed to run teacher-student self-training
//! experiments at desk scale:
//!
//! * [`seqlab`] — BIO label schemes, span decoding and phrase-level F1.
//! * [`model`] — a small tagger (embedding + context window + one hidden
//!   layer + softmax) with exact hand-written gradients, so every training
//!   signal can be verified against finite differences.
//! * [`data`] — CoNLL column-format ingestion, K-shot splits, a synthetic
//!   corpus generator and label corruption for noise experiments.
//! * [`acquisition`] — loss-decay driven sampling weights over the labeled
//!   set, used to draw validation mini-batches.
//! * [`reweight`] — token-level weights for pseudo-labeled batches from
//!   gradient inner products with validation batches.
//! * [`selftrain`] — the full training procedure: teacher fine-tuning,
//!   pseudo-labeling, the inner student loop and teacher replacement.
//! * [`checks`] — independent oracles (finite differences, brute-force
//!   decoders) that double-check the numerical core.
//! * [`harness`] — experiment runner behind the `metast` CLI.

pub mod acquisition;
pub mod checks;
pub mod data;
pub mod harness;
pub mod model;
pub mod reweight;
pub mod rngutil;
pub mod selftrain;
pub mod seqlab;

pub use seqlab::{LabelScheme, Span, TaggedSentence};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tag id {id} for scheme with {n_tags} tags")]
    InvalidTagId { id: usize, n_tags: usize },

    #[error("invalid span [{start}, {end}] for sentence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("length mismatch: {context}")]
    LengthMismatch { context: String },

    #[error("token id {id} out of range for vocab of size {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("acquisition state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Decoder-only transformer inference with retrieval augmentation.
//!
//! The crate contrasts two ways of feeding retrieved evidence to a decoder:
//! prepending it (every retrieval invalidates the whole key/value cache) and
//! appending it after the context (only the tokens since the last retrieval
//! are re-encoded). Around that sit a FLOP-instrumented forward pass, an
//! Okapi BM25 retriever, a closed-form cost model with exact reconciliation
//! against measured counts, and adapter-only fine-tuning with perplexity
//! evaluation.
//!
//! The crate is `no_std` + `alloc`; the `std` feature (on by default) only
//! enables runtime CPU feature detection in the matrix kernel.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod generation;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod tuneval;

use alloc::string::String;

pub use kvcache::KvCache;
pub use numerics::{FlopCategory, FlopsLedger, Real, RowRole, SeededRng, Tensor2};

/// Token identifier. Base vocabulary ids come first, the two marking tokens
/// directly after them.
pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("capacity exceeded: {requested} rows requested, capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("cannot keep {keep} rows of a cache holding {len}")]
    Truncate { keep: usize, len: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("cache holds {cached} rows but the pass starts at position {start}")]
    PositionMismatch { cached: usize, start: usize },
    #[error("evidence contains a marking token at offset {offset}")]
    MarkInEvidence { offset: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("retrieval requested but no evidence source was supplied")]
    NoEvidenceSource,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("corpus too short: need more than {need} tokens, have {have}")]
    CorpusTooShort { need: usize, have: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

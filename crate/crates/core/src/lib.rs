//! Logit-level chain-of-thought search for code generation.
//!
//! The engine drives any backend that exposes per-token logits through a
//! three-stage loop: thought generation biased by a word-preference table,
//! per-step refinement that branches from the top-K first tokens and ranks
//! paths by sigma distance, and final code generation scored in a sandbox.

pub mod aggregate;
pub mod config;
pub mod executor;
pub mod lm;
pub mod lpd;
pub mod lrbps;
pub mod pipeline;
pub mod report;

pub use lm::{
    GenerationRequest, GenerationResult, LanguageModel, LmError, LogitBias, LogitVector, Sampling,
    SamplingMode, TokenId, TraceEntry, Vocabulary,
};

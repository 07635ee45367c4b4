//! Explicit working memory for iterative, feedback-driven generation.
//!
//! A small decoder-only transformer attends to a bounded set of KV-cache
//! memory units next to its ordinary context. While decoding, the
//! orchestrator pauses to retrieve passages and fact-check finished sentences,
//! refreshes the memory FIFO-style, and backtracks over sentences that carry
//! unsupported claims. A synthetic knowledge world and a claim-level scorer
//! close the loop for evaluation.

pub mod attention;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod memory;
pub mod model;
pub mod orchestrator;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod toyworld;

pub use error::{Error, Result};

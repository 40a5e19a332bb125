//! Sequential model editing on a desk-scale causal transformer.
//!
//! The crate trains a small GPT-style model on a synthetic closed-world fact
//! corpus, then applies a stream of knowledge edits to its FFN key-value
//! memories: a closed-form rank-1 value rewrite per edit, a structural
//! translation loss refining the value projection, and a bounded FIFO weight
//! queue that detects semantically dependent earlier edits and re-aligns
//! them against the current one.
//!
//! Modules mirror the pipeline: [`numerics`] holds the dense primitives,
//! [`model`] the trainable transformer, [`tracing`] locates edit layers via
//! causal tracing, [`editor`] performs single edits, [`queue`] self-corrects
//! prior edits, [`dataset`] generates worlds and edit streams, and
//! [`harness`] drives sequential runs, metrics, and ablations.

pub mod dataset;
pub mod editor;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod queue;
pub mod tracing;

pub use error::{Error, Result};

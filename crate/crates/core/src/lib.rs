//! Knowledge-augmented entity resolution.
//!
//! Record pairs are serialized with column-level and entity-level knowledge
//! injected by template prompting (space or slash joiners) or by constrained
//! tuning (injection trees with soft positions and a visible matrix), then
//! classified by a small transformer encoder.

pub mod batchfile;
pub mod constrained;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod knowledge;
pub mod metrics;
pub mod serializer;
pub mod stats;
pub mod synth;
pub mod tabular;
pub mod tokenizer;

pub use error::{Error, Result};

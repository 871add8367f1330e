//! Desk-scale multimodal encoder-decoder for text-based visual question answering.
//!
//! The crate covers the whole pipeline: dataset schema and a deterministic
//! synthetic generator ([`data`]), multimodal serialization with masked
//! language modeling and relative position labels ([`input`]), a toy
//! transformer with its auxiliary heads and losses ([`model`]), adversarial
//! embedding-space training ([`train`]), Levenshtein-based answer correction
//! ([`postprocess`]) and the accuracy metric plus end-to-end evaluation
//! ([`eval`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod input;
pub mod model;
pub mod postprocess;
pub mod text;
pub mod train;

pub use error::{Error, Result};

//! Data-driven evaluation of natural-language generation systems.
//!
//! Given a corpus of human-scored (source, response) pairs, this crate infers
//! what the evaluation task is, proposes and consolidates scoring criteria,
//! optimizes a few-shot judging protocol against the human judgments, and
//! meta-evaluates the result with exact correlation statistics.
//!
//! Statistics are generic over the scalar type via `num_traits::Float`; the
//! pipeline itself uses the concrete [`Score`] alias below.

pub mod config;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod inference;
pub mod optimize;
pub mod protocol;
pub mod report;
pub mod run;
pub mod scoring;
pub mod seed;
pub mod stats;

/// Concrete scalar used throughout the pipeline.
pub type Score = f64;

/// Single-precision alternative for callers of the generic statistics.
pub type Score32 = f32;

pub use error::{Error, ErrorClass, Result};

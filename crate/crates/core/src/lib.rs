//! Modality-extensible multimodal fusion over a frozen query transformer.
//!
//! A shared, frozen query transformer compresses each modality's features
//! into a fixed number of query tokens. Each modality owns a small trainable
//! adapter (low-rank updates on the attention query/value projections,
//! learnable queries, and a feature-alignment projection). Supportive
//! modalities are merged into a fixed token budget by a self-gated fusion
//! module before a frozen reasoner answers the question.

pub mod backbone;
pub mod bind;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod mmqa;
pub mod model;
pub mod reasoner;
pub mod registry;
pub mod rng;
pub mod synthbench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Hierarchical multi-label book-genre classification over precomputed
//! per-modality embeddings.
//!
//! A level-1 classifier decides fiction vs nonfiction from four fused
//! modalities (cover image, blurb, cover text, metadata graph features).
//! A gating network then routes each book to exactly one of three level-2
//! pathways (visual, textual, multi-modal), each holding one multi-label
//! head per branch.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gating;
pub mod gradsuite;
pub mod kg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod parallel;
pub mod seed;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};

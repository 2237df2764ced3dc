//! Dimension-as-token embedding alignment for subject retrieval.
//!
//! A small attention transform maps precomputed sentence embeddings of
//! articles and subject labels into a shared space where cosine distance
//! ranks relevant subjects first. Training uses a margin loss with sampled
//! negatives; inference is an exact top-k scan over cached subject vectors.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};

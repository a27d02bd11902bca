//! Retrieval-augmented model-based Go agent, desk scale.
//!
//! A semi-parametric action-conditional prediction model retrieves
//! nearest-neighbor game positions from a position store and learns
//! end-to-end to use them, combined with pUCT tree search for acting and a
//! harness for self-play data generation, training, and evaluation sweeps.

pub mod ann;
pub mod datastore;
pub mod embedder;
pub mod go;
pub mod gtp;
pub mod harness;
pub mod model;
pub mod search;
pub mod tensor;
pub mod trainer;

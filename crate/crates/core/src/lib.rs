//! Measuring shape and color biases of one-shot learners.
//!
//! The crate trains small convolutional embedders and Matching Networks on
//! procedurally rendered shape/color stimuli, probes them with
//! (probe, shape-match, color-match) triples and summarizes the resulting
//! shape-bias measurements across seeds and training time.

pub mod bias;
pub mod corpus;
pub mod diffcore;
pub mod embedder;
pub mod error;
pub mod image;
pub mod matchnet;
pub mod oneshot;
pub mod seed;
pub mod stats;
pub mod stimgen;

pub use error::{Error, Result};

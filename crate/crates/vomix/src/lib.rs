//! Vision Transformer forward-pass engine with a pluggable Vote&Mix
//! token-reduction stage.
//!
//! The crate is organised around the data that flows through a forward pass:
//! a [`attention::TokenState`] (token embeddings plus per-token mixed sizes)
//! enters each block, a similarity vote selects the most homogeneous tokens,
//! their queries are mixed into the retained set, and attention runs with the
//! mixed queries against the original keys and values. On top of the engine
//! sit an analytic cost model ([`flops`]), an instrumented multiply counter
//! ([`opcount`]), a provenance tracker for source heatmaps ([`provenance`]),
//! and a wall-clock benchmark harness ([`bench`]).

pub mod attention;
pub mod bench;
pub mod error;
pub mod flops;
pub mod model;
pub mod opcount;
pub mod ppm;
pub mod provenance;
pub mod reference;
pub mod rng;
pub mod schedule;
pub mod strategy;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};

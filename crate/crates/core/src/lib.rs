//! Unsupervised domain adaptation on a tiny windowed-attention backbone.
//!
//! The crate is self-contained: an f64 reverse-mode tensor tape, a dual-stream
//! transformer backbone with entropy-reweighted double window attention, a
//! graph-convolutional domain discriminator behind a gradient reversal layer,
//! a gated cross-feature transform, pseudo-label-gated pixel mixing, a
//! deterministic SGD training loop, a synthetic two-domain benchmark, and
//! binary dataset/checkpoint formats.

pub mod error;
pub mod rng;
pub mod attention;
pub mod cft;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod objective;
pub mod pixmix;
pub mod backbone;
pub mod gdd;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

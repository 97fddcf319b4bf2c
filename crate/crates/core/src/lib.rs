//! Species distribution modeling toolkit.
//!
//! Everything needed to run desk-scale distribution-modeling experiments:
//! occurrence ingestion and location quantization ([`data`]), environmental
//! raster stacks and patch tensors ([`raster`]), spatial baselines built on a
//! k-d location index plus a from-scratch random forest ([`spatial`]), a small
//! deterministic neural engine with gradient checking ([`nn`]), the model zoo
//! and training loop ([`zoo`]), reciprocal-rank evaluation and cross-validation
//! protocols ([`eval`]), and a synthetic-world generator that makes every
//! claim testable without external data ([`synth`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod nn;

pub mod raster;
pub mod spatial;



pub use error::{Error, Result};

//! De-bias training toolkit built around greedy gradient ensembles.
//!
//! Biased branches (a fixed per-type answer prior, a context-only network,
//! or the model's own joint representation) greedily over-fit the easy,
//! biased portion of the data. The negative loss gradient at the ensemble's
//! current output becomes the pseudo-label for the next branch, so the base
//! model is left to learn the residual, harder distribution and is the only
//! model kept at test time.
//!
//! The crate also ships a synthetic changing-prior benchmark with known
//! ground-truth grounding, and the CGR/CGW/CGD grounding-faithfulness
//! metrics used to verify that the base model actually looks at the
//! evidence.

pub mod batch;
pub mod benchmark;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;

mod error;

pub use error::{Error, Result};

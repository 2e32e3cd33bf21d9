//! Knowledge-aware news click-through-rate modelling.
//!
//! The crate is organised along the stages of the pipeline:
//!
//! - [`nn`]: dense matrices, a reverse-mode tape, gradient checking and Adam.
//! - [`kg`]: the in-memory knowledge graph, one-hop sub-graph expansion and entity contexts.
//! - [`kge`]: TransE / TransH / TransR / TransD embeddings under a margin ranking loss.
//! - [`kcnn`]: the word/entity/context multi-channel CNN title encoder.
//! - [`attention`]: candidate-aware user aggregation and the click predictor.
//! - [`model`]: end-to-end model assembly, log-loss training and checkpoints.
//! - [`data`]: click-log and title formats, vocabularies, time splits, synthetic corpora.
//! - [`eval`]: AUC, F1, per-day traces and ablation reports.
//! - [`experiment`]: multi-seed variant grids on a fixed split.

pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub mod attention;
pub mod data;
pub mod kg;
pub mod kcnn;
pub mod kge;
pub mod model;
pub mod eval;
pub mod experiment;
pub mod util;

//! Self-supervised attributed-graph node clustering via dual-view
//! correlation reduction.
//!
//! The crate trains a siamese graph encoder on two augmented views of one
//! attributed graph — a KNN-graph view and a diffusion view — and reduces
//! cross-view redundancy at both the sample and feature level while a
//! self-supervised clustering head sharpens assignments. The library exposes
//! each stage (augmentation, encoding, correlation losses, clustering head,
//! metrics, trainer, reporting) as an independent module; the `dualgc`
//! binary wraps them in an experiment harness.

pub mod augment;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod idcrm;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod report;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};

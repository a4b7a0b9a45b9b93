//! Tooling for dataset-agnostic object detection training.
//!
//! - [`dataset`]: COCO ingestion, dataset statistics and regime labels
//! - [`eval`]: COCO-style AP@[0.5:0.95]
//! - [`corpus`]: equal-weight aggregation across datasets, leaderboards
//! - [`anchors`]: k-means anchor re-clustering
//! - [`controller`]: ReduceOnPlateau + early stopping with iteration patience
//! - [`templates`]: built-in model templates and training plans
//! - [`sidecar`]: NDJSON control protocol for external trainers

pub mod anchors;
pub mod controller;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod sidecar;
pub mod templates;

pub use error::{Error, Result};

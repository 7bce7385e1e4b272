//! Weakly-supervised whole-slide image classification.
//!
//! The crate covers the full path from slide pixels to evaluation tables:
//!
//! - [`slide_store`]: pyramidal slide directories, annotations, manifests and
//!   a deterministic synthetic slide generator
//! - [`tissue`]: grayscale conversion, Otsu thresholding and tissue masks
//! - [`tiling`]: sliding-window grids and annotation-guided tiles
//! - [`sampling`]: the label-alternating balanced batch sampler
//! - [`scorer`]: the tile scorer abstraction, a reference model with
//!   partial fine-tuning, and Adam
//! - [`training`]: random balanced sampling followed by hard mining, with
//!   validation-driven phase switching and early stopping
//! - [`inference`]: heatmaps, slide-level aggregation, two-stage combination
//! - [`evaluation`]: ROC AUC, log loss, bootstrap intervals and reports
//! - [`pipeline`]: dataset generation and the command-level entry points

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod scorer;
pub mod slide_store;
pub mod tiling;
pub mod tissue;
pub mod training;

pub use error::{Error, Result};

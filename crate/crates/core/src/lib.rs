//! Stacked semantics-guided attention for zero-shot recognition.
//!
//! The crate trains a small network that, given per-region visual features
//! of an image and semantic vectors for the classes, learns to weight the
//! regions that matter, embed class semantics into the visual space, and
//! match images to classes it has never seen labeled examples for.
//!
//! Layout:
//! - [`tensor`]: dense f64 matrices/vectors and the shared nonlinearities.
//! - [`sga`]: one (or several stacked) semantics-guided attention layers.
//! - [`matcher`]: semantic embedding, alignment and classification losses.
//! - [`model`]: the full network, parameter flattening, model files.
//! - [`trainer`]: RMSProp, early stopping, finite-difference gradient check.
//! - [`eval`]: zero-shot classification accuracy and retrieval mAP.
//! - [`dataio`]: dataset files, synthetic data, PCA, seen/unseen splits.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod sga;

pub mod matcher;
pub mod model;
pub mod trainer;

pub mod eval;

pub mod dataio;

pub use error::{Error, Result};

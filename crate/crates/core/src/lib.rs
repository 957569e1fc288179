//! Confidence-filtered unpaired translation for augmenting imbalanced image
//! datasets.
//!
//! The pipeline: [`dataset`] ingests or synthesises tiles, [`classifier`]
//! trains residual CNNs, [`filter`] ranks minority-class tiles by classifier
//! confidence and keeps the top fraction, [`gan`] learns a source → target
//! translator on that subset, [`eval`] measures how convincing and how useful
//! the synthetic tiles are, and [`turing`] runs blinded human review.

pub mod classifier;
pub mod dataset;
pub mod eval;
pub mod filter;
pub mod gan;
pub mod hashing;
pub mod imaging;
pub mod turing;

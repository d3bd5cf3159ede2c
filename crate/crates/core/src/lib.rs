//! Skin-tone fairness toolkit for dermatology classifiers: dataset
//! harmonization, stratified splits, frozen or trainable image backbones,
//! a baseline classifier with three bias-unlearning variants, and
//! tone-group fairness metrics.

pub mod error;
pub mod experiment;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod split;
pub mod synthetic;
pub mod train;

pub use candle_core::Device;
pub use error::{Error, Result};

//! Core library for Gleason-grade tissue segmentation: label schema, patch
//! tiling, segmentation losses, a dilated residual segmentation network,
//! evaluation metrics, scan grading, morphological cleanup, synthetic data
//! generation, and the training/inference pipeline.

pub mod config;
pub mod error;
pub mod grading;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod morph;
pub mod raster;
pub mod report;
pub mod synth;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use labels::{ClassMap, GradeGroup, Rgb};
pub use raster::Raster;

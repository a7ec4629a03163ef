//! Seasonal spatio-temporal SAR features and land-cover classification.
//!
//! The pipeline runs from speckled Sentinel-1-like time series to a
//! 28-channel seasonal feature cube, then to per-pixel class maps from a
//! Swin-Unet or a random-forest baseline, and finally to accuracy metrics.

pub mod baseline;
pub mod dataset;
pub mod despeckle;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod metrics;
pub mod model;
mod neighborhood;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};

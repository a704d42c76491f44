//! Video object segmentation from a first-frame mask: per-object forest and
//! logistic models over per-pixel features, a correlation tracker for search
//! windows, superpixel pooling and guided filtering of confidence maps,
//! J/F evaluation, and numeric generalization bounds.

pub mod bounds;
pub mod config;
pub mod error;
pub mod features;
pub mod forest;
pub mod guided_filter;
pub mod linear;
pub mod maps;
mod maps_predict;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod superpixel;
pub mod synthetic;
pub mod tensor_io;
pub mod tracker;

pub use config::Config;
pub use error::{Error, Result};

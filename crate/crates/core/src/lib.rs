//! Gradient-based detection of attribute-specific channels in the style
//! space of a style-modulated generator, with single- and multi-channel
//! editing and brute-force verification.

pub mod config;
pub mod detection;
pub mod error;
pub mod generator;
pub mod image_io;
pub mod manipulation;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod probes;
mod rng;
pub mod tensor;

pub use error::{Error, Result};

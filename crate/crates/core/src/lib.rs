//! SELD-Mamba: sound event localization, detection and distance estimation
//! with bidirectional selective state-space decoders.

pub mod data;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod ssm;
pub mod train;

pub use error::{Result, SeldError};

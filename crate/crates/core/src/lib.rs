//! Traffic flow imputation at unsensed road locations.
//!
//! Speed is treated as observed everywhere while flow is learned inductively:
//! the model never sees flow at hold-out sensors and must reconstruct it from
//! speed, static road context, and the flows of other sensors.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod netgraph;
pub mod staticfeat;
pub mod study;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

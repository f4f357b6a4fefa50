//! Semantic-map-to-image synthesis conditioned on learned edge maps, with
//! optical-flow-based temporal fine-tuning and evaluation tooling.

pub mod cli;
pub mod datakit;
pub mod dned;
pub mod edges;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod synthesis;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};

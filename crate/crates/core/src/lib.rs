pub mod data;
mod error;
pub mod fsutil;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

//! Calibration lab pairing a learnable linear classifier with a fixed simplex
//! ETF classifier and balancing their confidences during training.

pub mod error;
pub mod etf;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod posthoc;
pub mod train;

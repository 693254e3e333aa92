//! Golden-die simulation for wafer inspection.
//!
//! A simulator learns to render a defect-free wafer photo from its CAD layer
//! stack. Comparing the real photo against that simulated golden die yields a
//! per-pixel dissimilarity map whose peaks are candidate defects.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod defect;
pub mod error;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod palette;
pub mod raster;
pub mod report;
pub mod stats;
pub mod synth;
pub mod train;
pub mod tree;

pub use error::{Error, Result};

//! Two-stage liver and tumor segmentation on 2-D CT slices.
//!
//! A coarse R2UNet finds the liver on every slice; an edge-enhanced
//! network (E2Net) then segments liver and tumor inside the cropped liver
//! region, supervised with edge distance maps. Slices are stacked back into
//! 3-D label volumes and scored with LiTS-style metrics.

pub mod cli;
pub mod e2net;
pub mod engine;
pub mod error;
pub mod imageops;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};

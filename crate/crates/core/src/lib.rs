//! Trajectory representation learning and co-movement clustering for
//! detecting coordinated bot groups in game movement logs.

pub mod ckpt;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod extract;
pub mod geo;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geo::{CellId, GridLocation, Vocabulary, WorldConfig, ZoneId};

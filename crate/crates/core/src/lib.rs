pub mod bench;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod workspace;

pub use error::{Error, Result};

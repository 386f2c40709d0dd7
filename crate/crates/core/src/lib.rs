//! No-reference point cloud quality assessment.

pub mod error;
pub mod features;
pub mod io;
pub mod nn;
pub mod clustering;
pub mod graph;
pub mod model;
pub mod config;
pub mod evaluation;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

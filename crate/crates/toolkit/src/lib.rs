//! Datasets, configuration, experiment runners and reports around
//! `panini-core`.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{Result, ToolError};

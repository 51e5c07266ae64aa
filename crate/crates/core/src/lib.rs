#![no_std]

extern crate alloc;

pub mod checkpoint;
pub mod dafi;
pub mod degrade;
pub mod drep;
pub mod error;
pub mod gpm;
pub mod graph;
pub mod ife;
pub mod imaging;
pub mod kernels;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod panini;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{FeatureMap, Tensor};

//! Point-cloud shape representation with multi-scale features, learned
//! soft-assignment clustering and spatial-aware capsules.

pub mod aggregation;
pub mod backbone;
pub mod capsules;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod points;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

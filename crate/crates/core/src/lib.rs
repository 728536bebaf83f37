//! Unsupervised multi-scale deformable registration for CBCT volumes.

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mind;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};

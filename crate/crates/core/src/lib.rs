//! Super-resolution of segmented 3D volumes by fusing low-resolution 3D data
//! with high-resolution 2D images, plus a mesostructural metrics engine.

pub mod degrade;
pub mod error;
pub mod figures;
pub mod fixtures;
pub mod harness;
pub mod metrics;
pub mod netspec;
pub mod synth;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};

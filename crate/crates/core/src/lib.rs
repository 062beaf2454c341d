//! Simulation-to-evaluation laboratory for RIS-aided uplink localization.
//!
//! The pipeline runs in four stages:
//! 1. [`channel`] synthesizes BS and RIS received signals for MU positions;
//! 2. [`dataset`] materializes fingerprint datasets in a streamable binary format;
//! 3. [`reconstructor`] learns the map from the low-dimensional BS signal to the
//!    high-dimensional RIS signal, and [`localizer`] regresses MU positions
//!    from (reconstructed) RIS signals;
//! 4. [`eval`] compares pipelines through NMSE CDFs.

pub mod backbone;
pub mod channel;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod localizer;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod reconstructor;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

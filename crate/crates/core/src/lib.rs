//! Few-shot anomaly detection for medical-style images.
//!
//! A frozen vision/text transformer pair scores every patch of an image
//! against two sets of learnable prompts ("normal" and "anomalous"). Only the
//! prompt vectors and per-layer linear adapters are trained, on synthetic
//! anomalies produced from a handful of normal images by three synthesis
//! tasks (Poisson-blended CutPaste, Gaussian intensity change, radial Source
//! deformation).

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod grid;
pub mod mask;
pub mod model;
mod nn;
pub mod objective;
pub mod phantom;
pub mod prompt;
pub mod rng;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, Image};
pub use mask::AnomalyMask;

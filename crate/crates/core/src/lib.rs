//! Bone-peak localization and anatomical-region classification for A-mode
//! ultrasound signals.
//!
//! The pipeline couples two 1D U-Nets: a coarse network segments the full
//! echo trace and classifies the anatomical region from its bottleneck,
//! a probabilistic proposal selects the narrow window most likely to hold
//! the bone peak, and a refined network re-segments that window at higher
//! effective resolution. A built-in signal simulator, a windowed-argmax
//! baseline, and an evaluation harness round out the crate.

pub mod autodiff;
pub mod baseline;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod rng;
pub mod signal;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};

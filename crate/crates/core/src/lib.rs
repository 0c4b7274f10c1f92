//! Geometry-aware unbalanced optimal-transport losses for ground-plane crowd
//! localization.
//!
//! The crate builds transport costs from camera geometry ([`cost`]), solves
//! the entropic unbalanced transport problem with gradients ([`uot`]),
//! extracts and scores detections ([`localization`], [`metrics`]) and runs
//! synthetic comparisons of the loss family ([`simulator`]).

pub mod config;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod io;
pub mod localization;
pub mod metrics;
pub mod oracle;
pub mod simulator;
pub mod uot;

pub use error::{Error, Result};

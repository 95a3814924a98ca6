//! Temporal alignment of unsynchronized multi-view videos of dynamic
//! Gaussian-splat scenes.
//!
//! The pipeline recovers one time offset per camera in two stages: a coarse
//! integer-frame search that maximizes epipolar-consistent foreground
//! feature matches, then a continuous refinement of per-camera residuals
//! against the photometric reconstruction loss. A deterministic synthetic
//! data generator stands in for real captures and feature matchers so the
//! whole pipeline runs on a CPU in seconds.

pub mod coarse;
pub mod fine;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod rng;
pub mod scene;
pub mod synth;

pub use render::{photometric_loss, render, Image, RenderOptions};
pub use scene::{Camera, DeformationModel, Gaussian3D, TimeModel};

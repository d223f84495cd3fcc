//! Radar point cloud grid rendering with kernel point convolutions.
//!
//! The crate renders BEV feature maps from sparse radar point clouds with a
//! pillar encoder or a kernel-point BEV encoder, optionally at every scale of
//! a detection backbone, and ships a small end-to-end detection harness
//! (synthetic scenes, mini backbone, rotated NMS, center-distance AP) to
//! exercise the whole mechanism on a desktop CPU.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod detect;
pub mod encoders;
pub mod error;
pub mod geom;
pub mod kpconv;
pub mod multiscale;
pub mod real;
pub mod rng;

pub use error::{Error, Result};

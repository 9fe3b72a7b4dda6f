//! Probability distributions over oriented 3D bounding boxes.
//!
//! Boxes are generated one quantized parameter at a time (dimensions, then
//! center, then rotation). On top of that chain the crate provides beam
//! search, Monte-Carlo occupancy and quantile boxes, a quantile-based
//! uncertainty score, decoding conditioned on known dimensions, count-based
//! fitting, evaluation metrics, and generators for ambiguous synthetic
//! scenes.

pub mod box_core;
pub mod dist;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod synthgen;

pub use error::{Error, Result};

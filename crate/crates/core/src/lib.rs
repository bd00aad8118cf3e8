//! Descriptor-free 2D-3D keypoint matching and camera localization.

pub mod diff;
pub mod error;

pub use error::{Error, Result};
pub mod geometry;
pub mod matches;
pub mod nn;
pub mod encoder;
pub mod cluster;
pub mod global_graph;
pub mod local_matching;
pub mod outlier_rejection;
pub mod pose;
pub mod scene;
pub mod evaluation;
pub mod model;
pub mod training;
pub mod dataio;

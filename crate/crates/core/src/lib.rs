//! Dense surface reconstruction from RGB-D keyframes with pose-correcting
//! re-integration into a streamed, voxel-hashed signed distance volume.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod image;
pub mod keyframe;
pub mod evaluation;
pub mod meshing;
pub mod pipeline;
pub mod reintegration;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};

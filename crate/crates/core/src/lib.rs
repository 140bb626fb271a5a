//! Globally consistent surface maps from monocular endoscopic frame sequences.

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod preprocess;
pub mod sfs;
pub mod stitcher;
pub mod synthkit;

pub use calibration::CameraIntrinsics;
pub use error::{Error, Result};
pub use geometry::{CameraPose, Homography33};
pub use image::{ImageBuffer, Raster};
pub use mask::BinaryMask;
pub use sfs::{DepthMap, LightModel};

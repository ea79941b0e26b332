//! Recovering a textured mesh, its 6-DoF trajectory and the camera exposure
//! gap from motion-blurred video by analysis-by-synthesis.

pub mod camera;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fit;
pub mod formation;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod masks;
pub mod motion;
pub mod quat;
pub mod render;
pub mod store;

pub use camera::Camera;
pub use error::{Error, Result};
pub use geometry::{PrototypeKind, TexturedMesh};
pub use image::Image;
pub use motion::{ExposureGap, MotionModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Static pinhole camera looking down +z; image x grows right, y grows down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            focal,
            cx,
            cy,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Focal length equal to the image width, principal point at the center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Camera {
            width,
            height,
            focal: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(
                "camera image size must be positive".into(),
            ));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal {} must be positive",
                self.focal
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidArgument(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (
            self.focal * p.x / p.z + self.cx,
            self.focal * p.y / p.z + self.cy,
        )
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.focal,
            (v - self.cy) * depth / self.focal,
            depth,
        )
    }

    /// Same camera for an image downscaled by an integer factor.
    pub fn downscaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        Camera {
            width: self.width / factor,
            height: self.height / factor,
            focal: self.focal / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_unproject_round_trip() {
        let cam = Camera::default_for(128, 96);
        let p = cam.unproject(10.5, 80.25, 7.0);
        let (u, v) = cam.project(&p);
        assert!((u - 10.5).abs() < 1e-12 && (v - 80.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Camera::new(64, 64, 0.0, 32.0, 32.0).is_err());
        assert!(Camera::new(64, 64, 64.0, 99.0, 32.0).is_err());
    }
}

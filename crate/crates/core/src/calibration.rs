//! Pinhole intrinsics with Brown-Conrady distortion and image undistortion.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::mask::BinaryMask;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Camera intrinsics plus 3 radial and 2 tangential distortion terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub image_width: usize,
    pub image_height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

impl CameraIntrinsics {
    /// Distortion-free intrinsics.
    pub fn pinhole(image_width: usize, image_height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { image_width, image_height, fx, fy, cx, cy, k1: 0.0, k2: 0.0, k3: 0.0, p1: 0.0, p2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cy >= 0.0 && self.cx < self.image_width as f64 && self.cy < self.image_height as f64) {
            return Err(Error::param("principal point outside the image"));
        }
        let coeffs = [self.k1, self.k2, self.k3, self.p1, self.p2];
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("non-finite distortion coefficient"));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2].iter().any(|c| *c != 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let k: CameraIntrinsics = toml::from_str(s).map_err(|e| Error::Config(format!("calibration: {e}")))?;
        k.validate()?;
        Ok(k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}

/// Maps normalized camera coordinates to distorted pixel coordinates.
pub fn distort_point(pt: (f64, f64), k: &CameraIntrinsics) -> (f64, f64) {
    let (x, y) = pt;
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3));
    let xd = x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y;
    (k.fx * xd + k.cx, k.fy * yd + k.cy)
}

/// Inverse-warps `img` to remove lens distortion. The returned mask marks
/// output pixels whose source fell outside the frame (those are set to 0).
pub fn undistort_image(img: &ImageBuffer, k: &CameraIntrinsics) -> Result<(ImageBuffer, BinaryMask)> {
    if img.width() != k.image_width || img.height() != k.image_height {
        return Err(Error::dim(format!(
            "image is {}x{} but calibration expects {}x{}",
            img.width(),
            img.height(),
            k.image_width,
            k.image_height
        )));
    }
    k.validate()?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = vec![0.0; w * h * c];
    let mut invalid = BinaryMask::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let x = (u as f64 - k.cx) / k.fx;
            let y = (v as f64 - k.cy) / k.fy;
            let (su, sv) = distort_point((x, y), k);
            let base = (v * w + u) * c;
            let mut ok = true;
            for ch in 0..c {
                match img.sample(su, sv, ch) {
                    Some(val) => data[base + ch] = val,
                    None => ok = false,
                }
            }
            if !ok {
                data[base..base + c].iter_mut().for_each(|d| *d = 0.0);
                invalid.set(u, v, true);
            }
        }
    }
    Ok((ImageBuffer::new(w, h, c, data)?, invalid))
}

//! Weak-perspective projection for keypoint supervision and pinhole
//! geometry for the depth frame.
//!
//! The regressor predicts the weak-perspective camera in normalized image
//! units: a keypoint `X` (metres) lands at `s * X_xy + T`, where normalized
//! coordinates are pixels relative to the principal point divided by
//! `max(width, height) / 2`. [`NormalizedCamera::placement`] converts such a
//! camera into the metric translation that puts the body in front of the
//! pinhole depth camera with matching image scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec2, Vec3};

/// Pixels per millimetre and pixel offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: Vec2,
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: Vec2) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("camera scale must be positive, got {scale}")));
        }
        Ok(Self { scale, translation })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for PinholeIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }
}

impl PinholeIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let inside = self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64;
        if !(self.fx > 0.0 && self.fy > 0.0) || !inside || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pixels per normalized image unit.
    pub fn norm(&self) -> f64 {
        self.width.max(self.height) as f64 / 2.0
    }

    pub fn principal_point(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    pub fn to_normalized(&self, pixel: &Vec2) -> Vec2 {
        (pixel - self.principal_point()) / self.norm()
    }

    pub fn from_normalized(&self, p: &Vec2) -> Vec2 {
        self.principal_point() + p * self.norm()
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= -0.5 && pixel.y >= -0.5 && pixel.x < self.width as f64 - 0.5 && pixel.y < self.height as f64 - 0.5
    }
}

/// `x_hat = s * (R X)_xy + T`.
pub fn project_weak(points: &[Vec3], rot: &Mat3, cam: &WeakPerspectiveCamera) -> Result<Vec<Vec2>> {
    WeakPerspectiveCamera::new(cam.scale, cam.translation)?;
    Ok(points
        .iter()
        .map(|x| {
            let r = rot * x;
            Vec2::new(r.x, r.y) * cam.scale + cam.translation
        })
        .collect())
}

/// Pixel plus depth (mm) to a camera-frame point (mm).
pub fn backproject(pixel: &Vec2, depth: f64, k: &PinholeIntrinsics) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    Ok(Vec3::new((pixel.x - k.cx) * depth / k.fx, (pixel.y - k.cy) * depth / k.fy, depth))
}

pub fn project_pinhole(x: &Vec3, k: &PinholeIntrinsics) -> Result<Vec2> {
    if !(x.z > 0.0) {
        return Err(Error::InvalidInput(format!("point behind the camera (z = {})", x.z)));
    }
    Ok(Vec2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
}

/// Weak-perspective camera in normalized image units, keypoints in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCamera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl NormalizedCamera {
    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.translation[0], self.translation[1])
    }

    /// Normalized camera that images a body at `placement` (mm) the way the
    /// pinhole camera images its root.
    pub fn from_placement(placement: &Vec3, k: &PinholeIntrinsics) -> Self {
        let s_px = k.fx / placement.z;
        let t_px = Vec2::new(k.cx + s_px * placement.x, k.cy + k.fy / placement.z * placement.y);
        let t = k.to_normalized(&t_px);
        Self {
            scale: s_px * 1000.0 / k.norm(),
            translation: [t.x, t.y],
        }
    }

    pub fn to_pixels(&self, k: &PinholeIntrinsics) -> Result<WeakPerspectiveCamera> {
        WeakPerspectiveCamera::new(self.scale * k.norm() / 1000.0, k.from_normalized(&self.translation()))
    }

    /// Metric translation (mm) of the body root frame in the depth camera.
    pub fn placement(&self, k: &PinholeIntrinsics) -> Result<Vec3> {
        let cam = self.to_pixels(k)?;
        let z = k.fx / cam.scale;
        Ok(Vec3::new(
            (cam.translation.x - k.cx) / cam.scale,
            (cam.translation.y - k.cy) * z / k.fy,
            z,
        ))
    }

    /// Normalized image coordinates of points given in millimetres.
    pub fn project(&self, points_mm: &[Vec3]) -> Vec<Vec2> {
        points_mm
            .iter()
            .map(|x| Vec2::new(x.x, x.y) * (self.scale / 1000.0) + self.translation())
            .collect()
    }
}

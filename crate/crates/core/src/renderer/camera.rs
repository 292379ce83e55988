use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Ray;
use crate::{Error, Result};

/// Pinhole camera. The camera frame is x right, y down, z forward;
/// `rotation` maps camera-frame vectors to world space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub const DEFAULT_NEAR: f64 = 0.01;
    pub const DEFAULT_FAR: f64 = 1e4;

    /// Camera at `position` looking at `target`, principal point at the image center.
    pub fn look_at(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let forward = (target - position).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Camera {
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Matrix3::from_columns(&[right, down, forward]),
            position,
            near: Self::DEFAULT_NEAR,
            far: Self::DEFAULT_FAR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.near < self.far) {
            return Err(Error::Config(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera has zero-sized image".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.position))
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.ray_at(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Ray through continuous image coordinates (pixel corners at integers).
    pub fn ray_at(&self, x: f64, y: f64) -> Ray {
        let d = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        Ray::new(self.position, self.rotation * d)
    }

    /// Camera-space depth of a world point.
    pub fn depth_of(&self, p: &Vector3<f64>) -> f64 {
        self.forward().dot(&(p - self.position))
    }
}

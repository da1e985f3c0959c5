//! Pinhole camera with OpenCV axis conventions (x right, y down, z forward).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3<T>,
    /// World-to-camera translation: `p_cam = rotation * p_world + translation`.
    pub translation: Vec3<T>,
}

impl<T: Real> Camera<T> {
    /// Camera at `eye` looking at `target`; `up` is the world up direction
    /// (z for the room scenes).
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, fov_x_deg: f64, width: usize, height: usize) -> Self {
        let fwd = (target - eye).normalized();
        let mut right = fwd.cross(up);
        if right.norm().as_f64() < 1e-9 {
            right = fwd.cross(Vec3::new(T::one(), T::zero(), T::zero()));
        }
        let right = right.normalized();
        let down = fwd.cross(right);
        let rotation = Mat3::from_rows([right.to_array(), down.to_array(), fwd.to_array()]);
        let translation = -rotation.mul_vec(eye);
        let f = T::lit(width as f64 * 0.5 / (fov_x_deg.to_radians() * 0.5).tan());
        Self {
            fx: f,
            fy: f,
            cx: T::lit(width as f64 * 0.5),
            cy: T::lit(height as f64 * 0.5),
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Camera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("image size must be non-zero".into()));
        }
        let err = self.rotation.orthonormality_error().as_f64();
        if err > 1e-6 {
            return Err(Error::Camera(format!("rotation not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3<T> {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Pixel coordinates (pixel centers at +0.5) and camera depth.
    #[inline]
    pub fn project(&self, p: Vec3<T>) -> (T, T, T) {
        let c = self.to_camera(p);
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    /// Unit world-space direction through the center of pixel `(px, py)`.
    #[inline]
    pub fn pixel_ray(&self, px: usize, py: usize) -> Vec3<T> {
        let half = T::lit(0.5);
        let d = Vec3::new(
            (T::from_usize_lossy(px) + half - self.cx) / self.fx,
            (T::from_usize_lossy(py) + half - self.cy) / self.fy,
            T::one(),
        );
        self.rotation.transpose().mul_vec(d).normalized()
    }

    /// Forward (optical axis) direction in world space.
    pub fn forward(&self) -> Vec3<T> {
        self.rotation.row(2)
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
        }
    }
}

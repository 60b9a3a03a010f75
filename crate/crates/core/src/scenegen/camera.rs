use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
}

/// Orthonormal camera basis. Camera space is x = right, y = up, z = -forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub tan_half_fov: f64,
}

impl Camera {
    pub fn frame(&self) -> Result<CameraFrame> {
        let forward = (self.look_at - self.position)
            .try_normalize()
            .ok_or_else(|| Error::invalid("degenerate camera: look_at equals position"))?;
        let right = forward
            .cross(Vec3::new(0.0, 1.0, 0.0))
            .try_normalize()
            .ok_or_else(|| Error::invalid("degenerate camera: view direction parallel to world up"))?;
        let up = right.cross(forward);
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid(format!("field of view {} outside (0, 180)", self.fov_deg)));
        }
        Ok(CameraFrame {
            origin: self.position,
            right,
            up,
            forward,
            tan_half_fov: (self.fov_deg.to_radians() * 0.5).tan(),
        })
    }
}

impl CameraFrame {
    /// Camera-space direction `(px, py, -1)` through the center of pixel `(y, x)`.
    /// A point at depth `d` along this ray sits at `d * (px, py, -1)`.
    #[inline]
    pub fn pixel_ray(&self, y: usize, x: usize, height: usize, width: usize) -> Vec3 {
        let aspect = width as f64 / height as f64;
        let px = ((x as f64 + 0.5) / width as f64 * 2.0 - 1.0) * self.tan_half_fov * aspect;
        let py = (1.0 - (y as f64 + 0.5) / height as f64 * 2.0) * self.tan_half_fov;
        Vec3::new(px, py, -1.0)
    }

    pub fn dir_to_world(&self, d: Vec3) -> Vec3 {
        self.right * d.x() + self.up * d.y() - self.forward * d.z()
    }

    pub fn dir_to_camera(&self, d: Vec3) -> Vec3 {
        Vec3::new(d.dot(self.right), d.dot(self.up), -d.dot(self.forward))
    }

    pub fn point_to_camera(&self, p: Vec3) -> Vec3 {
        self.dir_to_camera(p - self.origin)
    }

    pub fn point_to_world(&self, p: Vec3) -> Vec3 {
        self.origin + self.dir_to_world(p)
    }

    /// Camera-space position of pixel `(y, x)` at the given depth.
    #[inline]
    pub fn unproject(&self, y: usize, x: usize, height: usize, width: usize, depth: f64) -> Vec3 {
        self.pixel_ray(y, x, height, width) * depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_camera_rejected() {
        let c = Camera {
            position: Vec3::new(1.0, 2.0, 3.0),
            look_at: Vec3::new(1.0, 2.0, 3.0),
            fov_deg: 50.0,
        };
        assert!(c.frame().is_err());
    }

    #[test]
    fn round_trip_world_camera() {
        let c = Camera {
            position: Vec3::new(0.3, 1.5, 4.0),
            look_at: Vec3::new(0.0, 0.5, 0.0),
            fov_deg: 50.0,
        };
        let f = c.frame().unwrap();
        let p = Vec3::new(0.7, -0.2, 1.1);
        let back = f.point_to_world(f.point_to_camera(p));
        assert!((back - p).norm() < 1e-12);
        let ahead = f.point_to_camera(c.look_at);
        assert!(ahead.x().abs() < 1e-12 && ahead.y().abs() < 1e-12 && ahead.z() < 0.0);
    }
}

//! Pinhole cameras in the OpenCV convention: +z forward, +y down, pixel
//! `(u, v)` with `u` along columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{DVec3, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered principal point and square pixels for a vertical field of view.
    pub fn from_fov(width: u32, height: u32, fov_y_degrees: f64) -> Self {
        let f = 0.5 * height as f64 / (0.5 * fov_y_degrees.to_radians()).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if self.width == 0 || self.height == 0 || !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn scaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Row-major 3x4 `[R | t]` mapping camera coordinates to world.
    pub world_from_camera: [[f64; 4]; 3],
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, world_from_camera: [[f64; 4]; 3]) -> Result<Self> {
        intrinsics.validate()?;
        let cam = Self {
            intrinsics,
            world_from_camera,
        };
        let (x, y, z) = (cam.axis(0), cam.axis(1), cam.axis(2));
        let ortho = (x.dot(y)).abs().max(x.dot(z).abs()).max(y.dot(z).abs());
        let unit = [x, y, z].iter().map(|a| (a.length() - 1.0).abs()).fold(0.0, f64::max);
        if !world_from_camera.iter().flatten().all(|v| v.is_finite()) || ortho > 1e-6 || unit > 1e-6 {
            return Err(Error::Config("pose rotation is not orthonormal".into()));
        }
        if x.cross(y).dot(z) < 0.0 {
            return Err(Error::Config("pose rotation is a reflection".into()));
        }
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// appears upward in the image.
    pub fn look_at(intrinsics: Intrinsics, eye: DVec3, target: DVec3, up: DVec3) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(right);
        if !right.is_finite() {
            return Err(Error::InvalidArgument("look_at: up is parallel to the view direction".into()));
        }
        let m = [
            [right.x, down.x, forward.x, eye.x],
            [right.y, down.y, forward.y, eye.y],
            [right.z, down.z, forward.z, eye.z],
        ];
        Self::new(intrinsics, m)
    }

    /// Column `i` of the rotation: camera x, y or z axis in world space.
    pub fn axis(&self, i: usize) -> DVec3 {
        let m = &self.world_from_camera;
        DVec3::new(m[0][i], m[1][i], m[2][i])
    }

    pub fn origin(&self) -> DVec3 {
        let m = &self.world_from_camera;
        DVec3::new(m[0][3], m[1][3], m[2][3])
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Ray through continuous pixel coordinates (pixel centers at `+0.5`).
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let d = DVec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let world = self.axis(0) * d.x + self.axis(1) * d.y + self.axis(2) * d.z;
        Ray::new(self.origin(), world.normalize())
    }

    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.ray_through(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Pixel coordinates of a world point, `None` behind the camera.
    pub fn project(&self, x: DVec3) -> Option<(f64, f64)> {
        let d = x - self.origin();
        let c = DVec3::new(d.dot(self.axis(0)), d.dot(self.axis(1)), d.dot(self.axis(2)));
        if c.z <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            world_from_camera: self.world_from_camera,
        }
    }
}

/// `n` cameras on a circle of the given radius around the world y axis,
/// raised by `elevation_degrees`, all looking at the origin. `phase` rotates
/// the whole orbit (in units of the angular step), which gives held-out
/// views interleaved with the training ones.
pub fn orbit(
    intrinsics: Intrinsics,
    n: usize,
    radius: f64,
    elevation_degrees: f64,
    arc_degrees: f64,
    phase: f64,
) -> Result<Vec<Camera>> {
    let el = elevation_degrees.to_radians();
    let arc = arc_degrees.to_radians();
    let full = (arc_degrees - 360.0).abs() < 1e-9;
    (0..n)
        .map(|i| {
            let f = if full {
                (i as f64 + phase) / n as f64
            } else if n > 1 {
                (i as f64 + phase) / (n - 1) as f64 - 0.5
            } else {
                0.0
            };
            let az = f * arc;
            let eye = DVec3::new(radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos());
            // World +y is up, which is image -y in the OpenCV convention.
            Camera::look_at(intrinsics, eye, DVec3::ZERO, DVec3::Y)
        })
        .collect()
}

//! Pinhole cameras. Poses are camera-to-world with OpenGL camera axes
//! (+x right, +y up, looking down -z); "view space" below is the image
//! aligned frame (+x right, +y down, +z forward) used for projection, so
//! view-space z is the depth along the optical axis.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirmath::{DirError, Rotation3};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error(transparent)]
    Dir(#[from] DirError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(CameraError::Intrinsics(format!("{self:?}")))
        }
    }

    /// Square pixels with the principal point at the image center.
    pub fn from_fov_y(fov_y_deg: f64, width: usize, height: usize) -> Self {
        let f = height as f64 / 2.0 / (fov_y_deg.to_radians() / 2.0).tan();
        Self { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation.
    pub rotation: Rotation3,
    /// Camera center in world coordinates.
    pub position: [f64; 3],
    pub intrinsics: Intrinsics,
}

/// Flips OpenGL camera axes into view space.
const FLIP: [f64; 3] = [1.0, -1.0, -1.0];

impl CameraPose {
    pub fn new(rotation: Rotation3, position: [f64; 3], intrinsics: Intrinsics) -> Result<Self, CameraError> {
        intrinsics.validate()?;
        Ok(Self { rotation, position, intrinsics })
    }

    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let rotation = Rotation3::look_at(eye, target, up)?;
        Self::new(rotation, eye, Intrinsics::from_fov_y(fov_y_deg, width, height))
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-to-view rotation.
    pub fn view_matrix(&self) -> Matrix3<f64> {
        let rt = self.rotation.matrix().transpose();
        Matrix3::from_fn(|r, c| FLIP[r] * rt[(r, c)])
    }

    pub fn world_to_view(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.view_matrix() * (Vector3::from(p) - Vector3::from(self.position));
        [v.x, v.y, v.z]
    }

    pub fn view_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let w = self.view_matrix().transpose() * Vector3::from(v) + Vector3::from(self.position);
        [w.x, w.y, w.z]
    }

    /// Pixel coordinates (continuous, pixel centers at +0.5) and view depth.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let [x, y, z] = self.world_to_view(p);
        if z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * x / z + k.cx, k.fy * y / z + k.cy, z))
    }

    /// Whether a projected position lies inside the image rectangle.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.intrinsics.width as f64 && v < self.intrinsics.height as f64
    }

    /// World-space ray direction through a continuous pixel position.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        let dir_view = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalize();
        let w = self.view_matrix().transpose() * dir_view;
        [w.x, w.y, w.z]
    }

    /// Camera-to-world 3x4 matrix rows `[R | t]`.
    pub fn to_3x4(&self) -> [[f64; 4]; 3] {
        let r = self.rotation.rows();
        [0, 1, 2].map(|i| [r[i][0], r[i][1], r[i][2], self.position[i]])
    }

    pub fn from_3x4(m: [[f64; 4]; 3], intrinsics: Intrinsics) -> Result<Self, CameraError> {
        let rotation = Rotation3::new([0, 1, 2].map(|i| [m[i][0], m[i][1], m[i][2]]))?;
        Self::new(rotation, [m[0][3], m[1][3], m[2][3]], intrinsics)
    }
}

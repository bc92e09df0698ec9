use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Pinhole intrinsics. Pixel `(row, col)` has its center at image
/// coordinates `(u, v) = (col, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Intrinsics for a centered principal point and a vertical field of view.
    pub fn from_fov(width: u32, height: u32, fov_y_deg: f64) -> Self {
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self {
            fx: fy,
            fy,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// World-from-camera rigid transform. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if err > Self::ORTHONORMAL_TOL || (det - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(Error::Data(format!(
                "rotation not orthonormal (|RᵀR - I| = {err:e}, det = {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: up parallel to view".into()))?;
        // y points down in the camera frame
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::new(rotation, eye)
    }

    /// Row-major 4×4 world-from-camera matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self> {
        let bottom = m[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Data(format!(
                "pose matrix bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        Pose::new(rotation, Vec3::new(m[0][3], m[1][3], m[2][3]))
    }
}

/// A camera ray `origin + t * direction`, `t ∈ [near, far]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub video_id: u32,
    /// `(row, col)` of the generating pixel.
    pub pixel: (u32, u32),
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_range(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }
}

/// Back-projects the center of pixel `(row, col)` through a pinhole camera.
pub fn camera_ray(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    row: u32,
    col: u32,
    video_id: u32,
    near: f64,
    far: f64,
) -> Result<Ray> {
    if row >= intrinsics.height || col >= intrinsics.width {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            intrinsics.height, intrinsics.width
        )));
    }
    let local = Vec3::new(
        (col as f64 - intrinsics.cx) / intrinsics.fx,
        (row as f64 - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let direction = (pose.rotation * local).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction,
        video_id,
        pixel: (row, col),
        near,
        far,
    })
}

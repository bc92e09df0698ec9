//! Posed camera frames, manifests, rays and synthetic oracle scenes.

mod camera;
mod featmap;
mod manifest;
mod sampling;
pub mod synthetic;

pub use camera::{camera_ray, CameraIntrinsics, Pose, Ray};
pub use featmap::{read_header as read_feature_header, FeatureMap, FEATURE_MAGIC};
pub use manifest::{load_manifest, write_manifest, MANIFEST_VERSION};
pub(crate) use manifest::quantize;
pub use sampling::{sample_ray_batch, PixelPool, RaySample};
pub(crate) use sampling::splitmix64;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: u32 = 64;
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Train,
    Prior,
    Test,
}

/// One posed image with its per-pixel feature map and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub id: u32,
    pub video_id: u32,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// `H·W·3` values in `[0, 1]`, row-major.
    pub rgb: Vec<f32>,
    pub features: FeatureMap,
    /// `true` marks a moving-object pixel, excluded from supervision.
    pub dynamic_mask: Vec<bool>,
    pub sky_mask: Vec<bool>,
}

impl CameraFrame {
    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn pixel_index(&self, row: u32, col: u32) -> usize {
        row as usize * self.width() as usize + col as usize
    }

    pub fn rgb_at(&self, row: u32, col: u32) -> [f32; 3] {
        let i = self.pixel_index(row, col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Checks that every image-shaped field agrees with the intrinsics and
    /// that the feature dimension is `feature_dim`.
    pub fn validate(&self, feature_dim: u32) -> Result<()> {
        self.intrinsics
            .validate()
            .map_err(|e| Error::frame(self.id, e.to_string()))?;
        self.pose
            .validate()
            .map_err(|e| Error::frame(self.id, e.to_string()))?;
        let n = self.intrinsics.pixel_count();
        if self.rgb.len() != n * 3 {
            return Err(Error::frame(self.id, "shape mismatch: rgb"));
        }
        if self.features.height != self.height() || self.features.width != self.width() {
            return Err(Error::frame(self.id, "shape mismatch: feature map"));
        }
        if self.features.dim != feature_dim {
            return Err(Error::frame(
                self.id,
                format!(
                    "feature-dim mismatch: expected {feature_dim}, found {}",
                    self.features.dim
                ),
            ));
        }
        if self.dynamic_mask.len() != n || self.sky_mask.len() != n {
            return Err(Error::frame(self.id, "shape mismatch: mask"));
        }
        Ok(())
    }

    /// Ray through the center of pixel `(row, col)`.
    pub fn pixel_to_ray(&self, row: u32, col: u32, near: f64, far: f64) -> Result<Ray> {
        camera_ray(
            &self.pose,
            &self.intrinsics,
            row,
            col,
            self.video_id,
            near,
            far,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub role: DatasetRole,
    pub feature_dim: u32,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<CameraFrame>,
}

impl DatasetManifest {
    pub fn new(role: DatasetRole, feature_dim: u32) -> Self {
        Self {
            role,
            feature_dim,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
            frames: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::Data(format!(
                "invalid near/far {} / {}",
                self.near, self.far
            )));
        }
        self.frames
            .iter()
            .try_for_each(|f| f.validate(self.feature_dim))
    }

    /// Distinct video ids in ascending order.
    pub fn video_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.frames.iter().map(|f| f.video_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn pixel_to_ray(&self, frame: usize, row: u32, col: u32) -> Result<Ray> {
        let f = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::InvalidArgument(format!("no frame at index {frame}")))?;
        f.pixel_to_ray(row, col, self.near, self.far)
    }

    /// Keeps only the frames at `indices` (e.g. one tile's members).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            role: self.role,
            feature_dim: self.feature_dim,
            near: self.near,
            far: self.far,
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

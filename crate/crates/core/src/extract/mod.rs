//! Surface extraction by ray marching, voxel downsampling of the surface
//! points and the persistent prior store.

mod store;
mod voxel;

pub use store::{load_prior, read_prior, save_prior, write_prior, PRIOR_MAGIC, PRIOR_VERSION};
pub use voxel::{voxel_downsample, PriorVoxelGrid, QueriedCell, VoxelCell};

use rayon::prelude::*;

use crate::dataset::{DatasetManifest, Ray};
use crate::error::Result;
use crate::field::TileField;
use crate::geometry::Vec3;
use crate::render::{render_ray, ProposalConfig};

/// Compositing mass the cumulative weight must strictly exceed.
pub const SURFACE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub feature: Vec<f32>,
    pub video_id: u32,
    /// `(row, col)` of the source pixel.
    pub pixel: (u32, u32),
}

/// Smallest index whose cumulative weight exceeds [`SURFACE_THRESHOLD`].
pub fn surface_index(weights: &[f64]) -> Option<usize> {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > SURFACE_THRESHOLD {
            return Some(i);
        }
    }
    None
}

/// Marches `ray` like [`render_ray`] (deterministic sampling) and returns the
/// first sample past the threshold with the feature of its own sub-field.
/// `None` for rays that never accumulate enough mass.
pub fn extract_surface(
    tile: &TileField,
    ray: &Ray,
    cfg: &ProposalConfig,
) -> Result<Option<SurfacePoint>> {
    let b = render_ray(tile, ray, cfg, None)?.final_batch;
    Ok(surface_index(b.weights()).map(|j| SurfacePoint {
        position: b.points[j],
        feature: b.feature_at(j).iter().map(|&v| v as f32).collect(),
        video_id: ray.video_id,
        pixel: ray.pixel,
    }))
}

/// Runs [`extract_surface`] over every `stride`-th non-dynamic pixel of
/// every frame (counted per frame, starting with the first). Output order
/// is frame-major, independent of the thread count.
pub fn extract_tile(
    tile: &TileField,
    manifest: &DatasetManifest,
    stride: usize,
    cfg: &ProposalConfig,
) -> Result<Vec<SurfacePoint>> {
    if stride == 0 {
        return Err(crate::Error::InvalidArgument("stride must be at least 1".into()));
    }
    cfg.validate(tile)?;
    let mut jobs = Vec::new();
    for (fi, frame) in manifest.frames.iter().enumerate() {
        tile.embeddings.index(frame.video_id)?;
        let w = frame.width() as usize;
        let kept = frame
            .dynamic_mask
            .iter()
            .enumerate()
            .filter(|(_, &d)| !d)
            .map(|(p, _)| p)
            .step_by(stride);
        jobs.extend(kept.map(|p| (fi, (p / w) as u32, (p % w) as u32)));
    }
    let found: Vec<Option<SurfacePoint>> = jobs
        .par_iter()
        .map(|&(fi, row, col)| {
            let ray = manifest.pixel_to_ray(fi, row, col)?;
            extract_surface(tile, &ray, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests;

//! Rasterization of queried prior cells into dense ego-frame grids and
//! fusion with online feature maps.

mod fusion;

pub use fusion::{fuse, fuse_backward, fuse_traced, Conv3x3, FuseGradients, FuseTrace, FusionHead};

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMap;
use crate::error::{Error, Result};
use crate::extract::{PriorVoxelGrid, QueriedCell};
use crate::geometry::Vec3;

/// Ego-frame extent of a dense grid. Bins are half-open,
/// `[lo + k·res, lo + (k+1)·res)`; rows run along y, columns along x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Meters per bin.
    pub resolution: f64,
}

impl Default for GridSpec {
    /// 100 m × 50 m around the ego vehicle at 0.5 m.
    fn default() -> Self {
        Self {
            x_range: (-50.0, 50.0),
            y_range: (-25.0, 25.0),
            z_range: (-3.0, 5.0),
            resolution: 0.5,
        }
    }
}

fn bins(range: (f64, f64), res: f64) -> usize {
    ((range.1 - range.0) / res).ceil() as usize
}

fn bin_of(v: f64, range: (f64, f64), res: f64, n: usize) -> Option<usize> {
    if !(v >= range.0 && v < range.1) {
        return None;
    }
    let k = ((v - range.0) / res).floor() as usize;
    (k < n).then_some(k)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.1 > r.0;
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid resolution must be positive, got {}", self.resolution)));
        }
        if !(ok(self.x_range) && ok(self.y_range) && ok(self.z_range)) {
            return Err(Error::InvalidArgument("grid ranges must be finite with hi > lo".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        bins(self.y_range, self.resolution)
    }

    pub fn cols(&self) -> usize {
        bins(self.x_range, self.resolution)
    }

    /// Vertical bins of the 3D grid.
    pub fn depth(&self) -> usize {
        bins(self.z_range, self.resolution)
    }

    /// `(row, col)` of an ego-frame point, `None` outside the x/y range.
    pub fn bev_bin(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = bin_of(y, self.y_range, self.resolution, self.rows())?;
        let c = bin_of(x, self.x_range, self.resolution, self.cols())?;
        Some((r, c))
    }
}

/// Dense `rows × cols × channels` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevFeatureGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            data: vec![0.0; spec.rows() * spec.cols() * channels],
        }
    }

    pub fn rows(&self) -> usize {
        self.spec.rows()
    }

    pub fn cols(&self) -> usize {
        self.spec.cols()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols() + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// The feature-map binary format (`f32`, `H = rows`, `W = cols`).
    pub fn to_feature_map(&self) -> FeatureMap {
        let mut fm = FeatureMap::zeros(self.rows() as u32, self.cols() as u32, self.channels as u32);
        for (o, v) in fm.data.iter_mut().zip(&self.data) {
            *o = *v as f32;
        }
        fm
    }
}

/// Dense `depth × rows × cols × channels` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureGrid3D {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelFeatureGrid3D {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            data: vec![0.0; spec.depth() * spec.rows() * spec.cols() * channels],
        }
    }

    pub fn at(&self, level: usize, row: usize, col: usize) -> &[f64] {
        let i = ((level * self.spec.rows() + row) * self.spec.cols() + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Levels stacked vertically: `H = depth·rows`, `W = cols`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let h = (self.spec.depth() * self.spec.rows()) as u32;
        let mut fm = FeatureMap::zeros(h, self.spec.cols() as u32, self.channels as u32);
        for (o, v) in fm.data.iter_mut().zip(&self.data) {
            *o = *v as f32;
        }
        fm
    }
}

/// Prior cells inside `spec` around an ego pose at `position` with heading
/// `yaw` (ego +x is `(cos yaw, sin yaw, 0)` in the world). Positions are in
/// the ego frame; the ranges need not be centered on the ego.
pub fn query_grid(prior: &PriorVoxelGrid, position: &Vec3, yaw: f64, spec: &GridSpec) -> Vec<QueriedCell> {
    let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
    let half = |r: (f64, f64)| 0.5 * (r.1 - r.0);
    let offset = Vec3::new(mid(spec.x_range), mid(spec.y_range), mid(spec.z_range));
    let (s, c) = yaw.sin_cos();
    let center = position + Vec3::new(c * offset.x - s * offset.y, s * offset.x + c * offset.y, offset.z);
    let half_extents = Vec3::new(half(spec.x_range), half(spec.y_range), half(spec.z_range));
    let mut cells = prior.query_region(&center, &half_extents, yaw);
    for cell in &mut cells {
        cell.position += offset;
    }
    cells
}

fn feature_dim(cells: &[QueriedCell]) -> Result<usize> {
    let d = cells.first().map_or(0, |c| c.feature.len());
    if cells.iter().any(|c| c.feature.len() != d) {
        return Err(Error::InvalidArgument("queried cells have mixed feature dims".into()));
    }
    Ok(d)
}

/// Scatters weighted features into `bins` slots of `d` channels and
/// normalizes each slot by its total weight. Returns the weights.
fn scatter_mean(cells: &[QueriedCell], d: usize, n: usize, slot: impl Fn(&QueriedCell) -> Option<usize>) -> (Vec<f64>, Vec<f64>) {
    let mut data = vec![0.0; n * d];
    let mut weight = vec![0.0; n];
    for c in cells {
        if let Some(s) = slot(c) {
            weight[s] += c.weight;
            for (o, f) in data[s * d..(s + 1) * d].iter_mut().zip(&c.feature) {
                *o += c.weight * *f as f64;
            }
        }
    }
    for (s, &w) in weight.iter().enumerate() {
        if w > 0.0 {
            data[s * d..(s + 1) * d].iter_mut().for_each(|v| *v /= w);
        }
    }
    (data, weight)
}

/// [`rasterize_bev`] plus the accumulated weight of every
/// `(row, col, slab)` bin.
pub fn rasterize_bev_weighted(
    cells: &[QueriedCell],
    spec: &GridSpec,
    num_height_bins: usize,
) -> Result<(BevFeatureGrid, Vec<f64>)> {
    spec.validate()?;
    if num_height_bins == 0 {
        return Err(Error::InvalidArgument("num_height_bins must be at least 1".into()));
    }
    let d = feature_dim(cells)?;
    let slab = (spec.z_range.1 - spec.z_range.0) / num_height_bins as f64;
    let n = spec.rows() * spec.cols() * num_height_bins;
    let (data, weight) = scatter_mean(cells, d, n, |c| {
        let (r, col) = spec.bev_bin(c.position.x, c.position.y)?;
        let h = bin_of(c.position.z, spec.z_range, slab, num_height_bins)?;
        Some((r * spec.cols() + col) * num_height_bins + h)
    });
    // (row, col, slab, d) is already the height-stacked channel order
    Ok((
        BevFeatureGrid {
            spec: *spec,
            channels: d * num_height_bins,
            data,
        },
        weight,
    ))
}

/// Weighted mean of the cell features per BEV bin and height slab, slabs
/// stacked into channels (`channel = slab·D + d`). Empty bins are zero;
/// cells outside the range are dropped.
pub fn rasterize_bev(cells: &[QueriedCell], spec: &GridSpec, num_height_bins: usize) -> Result<BevFeatureGrid> {
    Ok(rasterize_bev_weighted(cells, spec, num_height_bins)?.0)
}

/// [`rasterize_3d`] plus the accumulated weight per voxel.
pub fn rasterize_3d_weighted(cells: &[QueriedCell], spec: &GridSpec) -> Result<(VoxelFeatureGrid3D, Vec<f64>)> {
    spec.validate()?;
    let d = feature_dim(cells)?;
    let (rows, cols, depth) = (spec.rows(), spec.cols(), spec.depth());
    let (data, weight) = scatter_mean(cells, d, depth * rows * cols, |c| {
        let (r, col) = spec.bev_bin(c.position.x, c.position.y)?;
        let l = bin_of(c.position.z, spec.z_range, spec.resolution, depth)?;
        Some((l * rows + r) * cols + col)
    });
    Ok((
        VoxelFeatureGrid3D {
            spec: *spec,
            channels: d,
            data,
        },
        weight,
    ))
}

/// Weighted mean of the cell features per voxel of `resolution` on all
/// three axes.
pub fn rasterize_3d(cells: &[QueriedCell], spec: &GridSpec) -> Result<VoxelFeatureGrid3D> {
    Ok(rasterize_3d_weighted(cells, spec)?.0)
}

#[cfg(test)]
mod tests;

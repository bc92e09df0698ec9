use std::collections::BTreeMap;

use super::SurfacePoint;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Largest weight stored exactly by the on-disk `f32` weight field.
pub(crate) const MAX_WEIGHT: f64 = (1u32 << 24) as f64;

/// One occupied voxel. Keeps the running sum of member features so that
/// merges and downsampling agree; equality compares the stored mean and
/// weight only.
#[derive(Clone, Debug)]
pub struct VoxelCell {
    sum: Vec<f64>,
    weight: f64,
}

impl VoxelCell {
    pub(crate) fn from_mean(mean: &[f32], weight: f64) -> Self {
        Self {
            sum: mean.iter().map(|&m| m as f64 * weight).collect(),
            weight,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Mean member feature.
    pub fn feature(&self) -> Vec<f32> {
        self.sum.iter().map(|s| (s / self.weight) as f32).collect()
    }

    fn add(&mut self, other: &VoxelCell) {
        for (s, o) in self.sum.iter_mut().zip(&other.sum) {
            *s += o;
        }
        self.weight += other.weight;
    }
}

impl PartialEq for VoxelCell {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.feature() == other.feature()
    }
}

/// A prior cell returned by [`PriorVoxelGrid::query_region`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueriedCell {
    /// Cell center in the ego frame.
    pub position: Vec3,
    pub feature: Vec<f32>,
    pub weight: f64,
}

/// Sparse voxel map. Cell `k` covers `[origin + k·s, origin + (k+1)·s)` per
/// axis. Geometry is kept in `f32` to match the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorVoxelGrid {
    pub voxel_size: f32,
    pub origin: [f32; 3],
    pub feature_dim: usize,
    cells: BTreeMap<[i32; 3], VoxelCell>,
}

impl PriorVoxelGrid {
    pub fn new(voxel_size: f64, origin: Vec3, feature_dim: usize) -> Result<Self> {
        let vs = voxel_size as f32;
        if !(vs > 0.0 && vs.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel_size}")));
        }
        let origin = [origin.x as f32, origin.y as f32, origin.z as f32];
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("voxel origin must be finite".into()));
        }
        Ok(Self {
            voxel_size: vs,
            origin,
            feature_dim,
            cells: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, index: &[i32; 3]) -> Option<&VoxelCell> {
        self.cells.get(index)
    }

    /// Cells in ascending index order.
    pub fn cells(&self) -> impl Iterator<Item = (&[i32; 3], &VoxelCell)> {
        self.cells.iter()
    }

    /// `floor((p - origin) / voxel_size)`; `None` outside the `i32` range.
    pub fn cell_index(&self, p: &Vec3) -> Option<[i32; 3]> {
        let mut idx = [0i32; 3];
        for a in 0..3 {
            let k = ((p[a] - self.origin[a] as f64) / self.voxel_size as f64).floor();
            if !(k >= i32::MIN as f64 && k <= i32::MAX as f64) {
                return None;
            }
            idx[a] = k as i32;
        }
        Some(idx)
    }

    pub fn cell_center(&self, index: &[i32; 3]) -> Vec3 {
        let s = self.voxel_size as f64;
        Vec3::from_fn(|a, _| self.origin[a] as f64 + (index[a] as f64 + 0.5) * s)
    }

    /// Adds one point with unit weight.
    pub fn insert(&mut self, position: &Vec3, feature: &[f32]) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "feature has {} channels, grid expects {}",
                feature.len(),
                self.feature_dim
            )));
        }
        let idx = self
            .cell_index(position)
            .ok_or_else(|| Error::InvalidArgument(format!("point {position:?} is outside the voxel index range")))?;
        let cell = self.cells.entry(idx).or_insert_with(|| VoxelCell {
            sum: vec![0.0; feature.len()],
            weight: 0.0,
        });
        cell.add(&VoxelCell {
            sum: feature.iter().map(|&v| v as f64).collect(),
            weight: 1.0,
        });
        Ok(())
    }

    pub(crate) fn insert_cell(&mut self, index: [i32; 3], cell: VoxelCell) -> Result<()> {
        if self.cells.insert(index, cell).is_some() {
            return Err(Error::Data(format!("duplicate voxel {index:?}")));
        }
        Ok(())
    }

    /// Weighted-mean merge of `other` into `self`. Both grids must share
    /// voxel size, origin and feature dimension (an empty grid adopts the
    /// other's dimension).
    pub fn merge(&mut self, other: &PriorVoxelGrid) -> Result<()> {
        if self.voxel_size != other.voxel_size || self.origin != other.origin {
            return Err(Error::InvalidArgument("cannot merge grids with different voxel geometry".into()));
        }
        if self.is_empty() {
            self.feature_dim = other.feature_dim;
        } else if !other.is_empty() && other.feature_dim != self.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "cannot merge feature dims {} and {}",
                self.feature_dim, other.feature_dim
            )));
        }
        for (idx, cell) in &other.cells {
            match self.cells.get_mut(idx) {
                Some(c) => c.add(cell),
                None => {
                    self.cells.insert(*idx, cell.clone());
                }
            }
        }
        Ok(())
    }

    /// Cells whose centers lie in the box of `half_extents` around `center`,
    /// rotated by `yaw` about +z. Positions are returned in that box's frame.
    pub fn query_region(&self, center: &Vec3, half_extents: &Vec3, yaw: f64) -> Vec<QueriedCell> {
        let (s, c) = yaw.sin_cos();
        let to_ego = |p: Vec3| {
            let d = p - center;
            Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
        };
        // x-extent of the rotated box bounds the index range scanned
        let rx = c.abs() * half_extents.x + s.abs() * half_extents.y;
        let vs = self.voxel_size as f64;
        let lo = ((center.x - rx - self.origin[0] as f64) / vs).floor() - 1.0;
        let hi = ((center.x + rx - self.origin[0] as f64) / vs).floor() + 1.0;
        let clamp = |v: f64| {
            if v.is_nan() {
                0
            } else {
                v.clamp(i32::MIN as f64, i32::MAX as f64) as i32
            }
        };
        let (lo, hi) = if rx.is_finite() { (clamp(lo), clamp(hi)) } else { (i32::MIN, i32::MAX) };
        self.cells
            .range([lo, i32::MIN, i32::MIN]..=[hi, i32::MAX, i32::MAX])
            .filter_map(|(idx, cell)| {
                let e = to_ego(self.cell_center(idx));
                let inside = (0..3).all(|a| e[a].abs() <= half_extents[a]);
                inside.then(|| QueriedCell {
                    position: e,
                    feature: cell.feature(),
                    weight: cell.weight,
                })
            })
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn sums(&self, index: &[i32; 3]) -> Option<&[f64]> {
        self.cells.get(index).map(|c| c.sum.as_slice())
    }
}

/// Groups `points` by voxel and averages their features. Member features
/// are summed in `f64` in input order, so the result only depends on the
/// multiset of points per cell when those sums are exact (the common case
/// for `f32` features of similar magnitude).
pub fn voxel_downsample(points: &[SurfacePoint], voxel_size: f64, origin: Vec3) -> Result<PriorVoxelGrid> {
    let dim = points.first().map_or(0, |p| p.feature.len());
    let mut grid = PriorVoxelGrid::new(voxel_size, origin, dim)?;
    for p in points {
        grid.insert(&p.position, &p.feature)?;
    }
    Ok(grid)
}

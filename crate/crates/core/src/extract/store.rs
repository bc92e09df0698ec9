//! Prior file: `"PSPV"`, version `u32`, voxel size `f32`, origin `3×f32`,
//! feature dim `u32`, cell count `u64`, then per cell `3×i32` index,
//! `D×f32` mean feature and `f32` weight. Little-endian; cells in ascending
//! index order.

use std::path::Path;

use super::voxel::{PriorVoxelGrid, VoxelCell, MAX_WEIGHT};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const PRIOR_MAGIC: [u8; 4] = *b"PSPV";
pub const PRIOR_VERSION: u32 = 1;

pub fn write_prior(grid: &PriorVoxelGrid) -> Result<Vec<u8>> {
    let d = grid.feature_dim;
    let mut out = Vec::with_capacity(32 + grid.len() * (16 + 4 * d));
    out.extend_from_slice(&PRIOR_MAGIC);
    out.extend_from_slice(&PRIOR_VERSION.to_le_bytes());
    out.extend_from_slice(&grid.voxel_size.to_le_bytes());
    for o in grid.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(grid.len() as u64).to_le_bytes());
    for (idx, cell) in grid.cells() {
        if cell.weight() > MAX_WEIGHT {
            return Err(Error::Data(format!("voxel {idx:?} weight {} exceeds {MAX_WEIGHT}", cell.weight())));
        }
        for i in idx {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for f in cell.feature() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(cell.weight() as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn i32(&mut self) -> Result<i32> {
        self.take().map(i32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take().map(f32::from_le_bytes)
    }
}

pub fn read_prior(bytes: &[u8], what: &str) -> Result<PriorVoxelGrid> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take::<4>()? != PRIOR_MAGIC {
        return Err(Error::format(what, "bad magic (expected PSPV)"));
    }
    let version = r.u32()?;
    if version != PRIOR_VERSION {
        return Err(Error::format(what, format!("unsupported version {version}")));
    }
    let voxel_size = r.f32()?;
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let dim = r.u32()? as usize;
    let count = u64::from_le_bytes(r.take()?);
    let record = 16 + 4 * dim as u64;
    let remaining = (bytes.len() - r.pos) as u64;
    if count.checked_mul(record) != Some(remaining) {
        return Err(Error::format(
            what,
            format!("{count} cells of {record} bytes do not match the {remaining} bytes left"),
        ));
    }
    let mut grid = PriorVoxelGrid::new(
        voxel_size as f64,
        Vec3::new(origin[0] as f64, origin[1] as f64, origin[2] as f64),
        dim,
    )
    .map_err(|e| Error::format(what, e.to_string()))?;
    let mut prev: Option<[i32; 3]> = None;
    for _ in 0..count {
        let idx = [r.i32()?, r.i32()?, r.i32()?];
        let feature = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let weight = r.f32()? as f64;
        if !(weight > 0.0 && weight <= MAX_WEIGHT) || feature.iter().any(|f| !f.is_finite()) {
            return Err(Error::format(what, format!("voxel {idx:?} has an invalid weight or feature")));
        }
        if prev.is_some_and(|p| p >= idx) {
            return Err(Error::format(what, "cells are not in ascending index order"));
        }
        prev = Some(idx);
        grid.insert_cell(idx, VoxelCell::from_mean(&feature, weight))?;
    }
    Ok(grid)
}

pub fn save_prior(grid: &PriorVoxelGrid, path: &Path) -> Result<()> {
    let bytes = write_prior(grid)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_prior(path: &Path) -> Result<PriorVoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_prior(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(cells: usize, dim: usize, seed: u64) -> PriorVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PriorVoxelGrid::new(0.2, Vec3::new(-1.5, 0.3, 2.0), dim).unwrap();
        while g.len() < cells {
            let idx = [0; 3].map(|_| rng.random_range(-500..500));
            if g.get(&idx).is_some() {
                continue;
            }
            let f: Vec<f32> = (0..dim).map(|_| rng.random_range(-10.0f32..10.0)).collect();
            let w = rng.random_range(1..1000) as f64;
            g.insert_cell(idx, VoxelCell::from_mean(&f, w)).unwrap();
        }
        g
    }

    #[test]
    fn empty_grid_round_trips() {
        let g = PriorVoxelGrid::new(0.5, Vec3::zeros(), 3).unwrap();
        let back = read_prior(&write_prior(&g).unwrap(), "t").unwrap();
        assert_eq!(back, g);
        assert_eq!(back.feature_dim, 3);
    }

    #[test]
    fn random_grid_round_trips_bit_exactly() {
        let g = random_grid(1000, 5, 1);
        let bytes = write_prior(&g).unwrap();
        let back = read_prior(&bytes, "t").unwrap();
        assert_eq!(back, g);
        for ((ia, ca), (ib, cb)) in g.cells().zip(back.cells()) {
            assert_eq!(ia, ib);
            let bits = |c: &VoxelCell| c.feature().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ca), bits(cb));
        }
        assert_eq!(write_prior(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pspv");
        let g = random_grid(1, 2, 2);
        save_prior(&g, &path).unwrap();
        assert_eq!(load_prior(&path).unwrap(), g);
    }

    #[test]
    fn header_layout() {
        let g = random_grid(2, 1, 3);
        let b = write_prior(&g).unwrap();
        assert_eq!(&b[..4], b"PSPV");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[8..12].try_into().unwrap()), 0.2f32);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[28..36].try_into().unwrap()), 2);
        assert_eq!(b.len(), 36 + 2 * 20);
    }

    #[test]
    fn rejects_corruption() {
        let g = random_grid(4, 2, 4);
        let b = write_prior(&g).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_prior(&bad, "t"), Err(Error::Format { .. })));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(read_prior(&bad, "t").is_err());
        assert!(read_prior(&b[..b.len() - 1], "t").is_err());
        assert!(read_prior(&b[..10], "t").is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(read_prior(&long, "t").is_err());
    }
}

//! The pipeline stages as functions of one [`PipelineConfig`], with the
//! on-disk layout every stage reads and writes:
//!
//! ```text
//! paths.plan                                   partition
//! paths.checkpoints/tile_NNN/tile_final.npck   train (plus metrics.csv)
//! paths.priors/tile_NNN.pspv, prior.pspv       extract
//! ```

use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::dataset::{load_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::extract::{extract_tile, load_prior, save_prior, voxel_downsample, PriorVoxelGrid, QueriedCell};
use crate::field::{load_checkpoint, TileField};
use crate::geometry::Vec3;
use crate::integrate::{query_grid, rasterize_3d, rasterize_bev, BevFeatureGrid, VoxelFeatureGrid3D};
use crate::partition::{plan_tiles, TilePlan};
use crate::render::render_image;
use crate::train::{train_tile, TrainOutputs, TrainReport};

/// Output layout of [`Pipeline::rasterize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterMode {
    /// Height slabs stacked into channels.
    Bev,
    /// Levels stacked into rows.
    Voxels,
}

fn missing(what: &str, path: &Path, stage: &str) -> Error {
    Error::Data(format!("missing {what} {}; run `{stage}` first", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn plan_path(&self) -> &Path {
        &self.config.paths.plan
    }

    pub fn tile_dir(&self, tile: usize) -> PathBuf {
        self.config.paths.checkpoints.join(format!("tile_{tile:03}"))
    }

    pub fn final_checkpoint(&self, tile: usize) -> PathBuf {
        self.tile_dir(tile).join("tile_final.npck")
    }

    pub fn tile_prior_path(&self, tile: usize) -> PathBuf {
        self.config.paths.priors.join(format!("tile_{tile:03}.pspv"))
    }

    /// The merged prior of every tile.
    pub fn prior_path(&self) -> PathBuf {
        self.config.paths.priors.join("prior.pspv")
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let p = &self.config.paths.manifest;
        if !p.exists() {
            return Err(Error::Data(format!("missing manifest {}", p.display())));
        }
        load_manifest(p)
    }

    pub fn plan(&self) -> Result<TilePlan> {
        let p = self.plan_path();
        let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => missing("tile plan", p, "partition"),
            _ => Error::io(p, e),
        })?;
        TilePlan::from_json(&text)
    }

    fn check_tile(plan: &TilePlan, tile: usize) -> Result<()> {
        if tile >= plan.tile_centroids.len() {
            return Err(Error::InvalidArgument(format!(
                "tile {tile} does not exist (plan has {})",
                plan.tile_centroids.len()
            )));
        }
        Ok(())
    }

    pub fn load_tile(&self, tile: usize) -> Result<TileField> {
        let p = self.final_checkpoint(tile);
        if !p.exists() {
            return Err(missing(&format!("checkpoint for tile {tile}"), &p, "train"));
        }
        load_checkpoint(&p)
    }

    /// Clusters the manifest's camera positions and writes the plan.
    pub fn partition(&self) -> Result<TilePlan> {
        let m = self.manifest()?;
        let c = &self.config;
        let plan = plan_tiles(&m, c.partition.num_tiles, c.partition.subfields_per_tile, c.seed)?;
        parent_dir(self.plan_path())?;
        let p = self.plan_path();
        std::fs::write(p, plan.to_json()).map_err(|e| Error::io(p, e))?;
        Ok(plan)
    }

    /// Freshly initialized field for one tile of the plan, with the indices
    /// of the tile's frames.
    pub fn init_tile(&self, manifest: &DatasetManifest, plan: &TilePlan, tile: usize) -> Result<(TileField, Vec<usize>)> {
        Self::check_tile(plan, tile)?;
        let frames = plan.frames_in_tile(tile);
        let bounds = self.config.tile_bounds(manifest, &frames)?;
        let fc = self.config.field_config(bounds, manifest.feature_dim as usize)?;
        let videos = manifest.subset(&frames).video_ids();
        let seed = self.config.seed.wrapping_add(tile as u64);
        let field = TileField::new(fc, &plan.subfield_centroids_per_tile[tile], &videos, seed)?;
        Ok((field, frames))
    }

    /// Trains the given tiles (all when empty), writing checkpoints and a
    /// per-step metrics CSV into each tile's directory.
    pub fn train(&self, tiles: &[usize]) -> Result<Vec<TrainReport>> {
        let m = self.manifest()?;
        let plan = self.plan()?;
        let all: Vec<usize> = (0..plan.tile_centroids.len()).collect();
        let tiles = if tiles.is_empty() { &all[..] } else { tiles };
        let cfg = self.config.train_config();
        let mut reports = Vec::with_capacity(tiles.len());
        for &t in tiles {
            let (field, frames) = self.init_tile(&m, &plan, t)?;
            let sub = m.subset(&frames);
            let dir = self.tile_dir(t);
            create_dir(&dir)?;
            let csv = dir.join("metrics.csv");
            log::info!("training tile {t} on {} frames ({} parameters)", frames.len(), field.num_params());
            let out = TrainOutputs {
                checkpoint_dir: Some(&dir),
                metrics_csv: Some(&csv),
            };
            let (_, report) = train_tile(field, &sub, &cfg, out)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Renders manifest frame `frame` with its tile's trained field into
    /// `out_dir` as `frame_NNNNNN_{rgb,opacity,depth}.png` and `.feat`.
    pub fn render(&self, frame: usize, out_dir: &Path) -> Result<()> {
        let m = self.manifest()?;
        let plan = self.plan()?;
        let Some(&tile) = plan.assignments.get(frame) else {
            return Err(Error::InvalidArgument(format!(
                "frame {frame} does not exist (manifest has {})",
                m.frames.len()
            )));
        };
        let field = self.load_tile(tile)?;
        let f = &m.frames[frame];
        let img = render_image(&field, f, &self.config.train.proposal, m.near, m.far)?;
        create_dir(out_dir)?;
        img.save(out_dir, &format!("frame_{:06}", f.id), field.bounds().extent().norm())
    }

    /// Marches every tile's frames, downsamples the surface points per tile
    /// and writes the per-tile priors and their merge.
    pub fn extract(&self) -> Result<PriorVoxelGrid> {
        let m = self.manifest()?;
        let plan = self.plan()?;
        let c = &self.config.extract;
        let origin = Vec3::from(c.origin);
        let mut merged = PriorVoxelGrid::new(c.voxel_size, origin, 0)?;
        create_dir(&self.config.paths.priors)?;
        for t in 0..plan.tile_centroids.len() {
            let field = self.load_tile(t)?;
            let sub = m.subset(&plan.frames_in_tile(t));
            let points = extract_tile(&field, &sub, c.stride, &self.config.train.proposal)?;
            let mut grid = voxel_downsample(&points, c.voxel_size, origin)?;
            if grid.is_empty() {
                grid = PriorVoxelGrid::new(c.voxel_size, origin, field.feature_dim())?;
            }
            log::info!("tile {t}: {} surface points in {} voxels", points.len(), grid.len());
            save_prior(&grid, &self.tile_prior_path(t))?;
            merged.merge(&grid)?;
        }
        save_prior(&merged, &self.prior_path())?;
        Ok(merged)
    }

    pub fn load_prior(&self) -> Result<PriorVoxelGrid> {
        let p = self.prior_path();
        if !p.exists() {
            return Err(missing("prior", &p, "extract"));
        }
        load_prior(&p)
    }

    /// Prior cells in the box of `half_extents` around `center` rotated by
    /// `yaw`; empty outside the prior's coverage.
    pub fn query(&self, center: &Vec3, half_extents: &Vec3, yaw: f64) -> Result<Vec<QueriedCell>> {
        if half_extents.iter().any(|h| !(*h >= 0.0)) {
            return Err(Error::InvalidArgument("half extents must be non-negative".into()));
        }
        Ok(self.load_prior()?.query_region(center, half_extents, yaw))
    }

    /// Rasterizes the prior around an ego pose onto the configured grid and
    /// writes it in the feature-map format.
    pub fn rasterize(&self, position: &Vec3, yaw: f64, mode: RasterMode, out: &Path) -> Result<()> {
        let prior = self.load_prior()?;
        let r = &self.config.rasterize;
        let cells = query_grid(&prior, position, yaw, &r.grid);
        // an empty query still yields the prior's channel count
        let d = prior.feature_dim;
        let fm = match mode {
            RasterMode::Bev if cells.is_empty() => BevFeatureGrid::zeros(r.grid, d * r.num_height_bins).to_feature_map(),
            RasterMode::Bev => rasterize_bev(&cells, &r.grid, r.num_height_bins)?.to_feature_map(),
            RasterMode::Voxels if cells.is_empty() => VoxelFeatureGrid3D::zeros(r.grid, d).to_feature_map(),
            RasterMode::Voxels => rasterize_3d(&cells, &r.grid)?.to_feature_map(),
        };
        parent_dir(out)?;
        fm.write(out)
    }
}

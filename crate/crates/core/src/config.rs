//! Pipeline configuration: one TOML document layered over a named preset.
//!
//! ```toml
//! preset = "desk"   # values below override the preset
//! seed = 7
//!
//! [train]
//! iterations = 500
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::geometry::{Aabb, Vec3};
use crate::integrate::GridSpec;
use crate::render::ProposalConfig;
use crate::train::TrainConfig;

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV: &str = "NEURAL_PRIOR_CONFIG";

pub const PRESETS: [&str; 2] = ["desk", "paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub plan: PathBuf,
    pub checkpoints: PathBuf,
    pub priors: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_tiles: usize,
    pub subfields_per_tile: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    /// Field architecture preset: `desk`, `paper` or `tiny`.
    pub preset: String,
    /// Tile bounds; when absent, the camera centers of the tile padded by
    /// `margin` on every side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    /// Every `stride`-th non-dynamic pixel is marched.
    pub stride: usize,
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterizeConfig {
    pub grid: GridSpec,
    pub num_height_bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Preset the document was layered on.
    pub preset: String,
    /// Overrides the seed of every stochastic stage.
    pub seed: u64,
    pub paths: PathsConfig,
    pub partition: PartitionConfig,
    pub field: FieldSection,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub rasterize: RasterizeConfig,
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            preset: "desk".into(),
            seed: 0,
            paths: PathsConfig {
                manifest: "data/manifest.json".into(),
                plan: "out/plan.json".into(),
                checkpoints: "out/checkpoints".into(),
                priors: "out/priors".into(),
            },
            partition: PartitionConfig {
                num_tiles: 1,
                subfields_per_tile: 2,
            },
            field: FieldSection {
                preset: "desk".into(),
                bounds: None,
                margin: 10.0,
            },
            train: TrainConfig {
                iterations: 2000,
                batch_size: 1024,
                proposal: ProposalConfig {
                    stage_samples: vec![64, 32],
                    final_samples: 32,
                },
                ..TrainConfig::default()
            },
            extract: ExtractConfig {
                stride: 4,
                voxel_size: 0.2,
                origin: [0.0; 3],
            },
            rasterize: RasterizeConfig {
                grid: GridSpec::default(),
                num_height_bins: 8,
            },
        };
        match name {
            "desk" => Ok(desk),
            "paper" => Ok(Self {
                preset: "paper".into(),
                partition: PartitionConfig {
                    num_tiles: 8,
                    subfields_per_tile: 16,
                },
                field: FieldSection {
                    preset: "paper".into(),
                    bounds: None,
                    margin: 50.0,
                },
                train: TrainConfig {
                    iterations: 100_000,
                    batch_size: 1 << 16,
                    proposal: ProposalConfig {
                        stage_samples: vec![128, 64],
                        final_samples: 32,
                    },
                    ..TrainConfig::default()
                },
                ..desk
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// Parses a document, layering it over the preset it names
    /// (`desk` when absent). Tables merge key by key; other values replace.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let name = match doc.get("preset") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let base = Self::preset(name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, doc);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Prefixes every relative path with `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.manifest, &mut p.plan, &mut p.checkpoints, &mut p.priors] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !PRESETS.contains(&self.preset.as_str()) {
            return bad(format!("unknown preset {:?}", self.preset));
        }
        if !["desk", "paper", "tiny"].contains(&self.field.preset.as_str()) {
            return bad(format!("unknown field preset {:?}", self.field.preset));
        }
        if self.partition.num_tiles == 0 || self.partition.subfields_per_tile == 0 {
            return bad("partition needs at least one tile and one sub-field".into());
        }
        if !(self.field.margin >= 0.0) {
            return bad("field margin must be non-negative".into());
        }
        if self.extract.stride == 0 || !(self.extract.voxel_size > 0.0) {
            return bad("extract stride must be >= 1 and voxel_size > 0".into());
        }
        if self.rasterize.num_height_bins == 0 {
            return bad("rasterize.num_height_bins must be >= 1".into());
        }
        self.rasterize.grid.validate()?;
        self.train_config().validate()
    }

    /// Training settings with the pipeline seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Tile bounds for the frames at `frames`.
    pub fn tile_bounds(&self, manifest: &DatasetManifest, frames: &[usize]) -> Result<Aabb> {
        if let Some(b) = self.field.bounds {
            return Ok(b);
        }
        if frames.is_empty() {
            return Err(Error::Data("cannot derive bounds for a tile without frames".into()));
        }
        let m = self.field.margin;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in frames {
            let t = manifest.frames[i].pose.translation;
            lo = lo.inf(&t);
            hi = hi.sup(&t);
        }
        Ok(Aabb::new([lo.x - m, lo.y - m, lo.z - m], [hi.x + m, hi.y + m, hi.z + m]))
    }

    pub fn field_config(&self, bounds: Aabb, feature_dim: usize) -> Result<FieldConfig> {
        let cfg = match self.field.preset.as_str() {
            "desk" => FieldConfig::desk(bounds, feature_dim),
            "paper" => FieldConfig::paper(bounds, feature_dim),
            "tiny" => FieldConfig::tiny(bounds, feature_dim),
            other => return Err(Error::Config(format!("unknown field preset {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = PipelineConfig::preset(name).unwrap();
            assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn emitted_config_carries_loss_weights() {
        let text = PipelineConfig::preset("desk").unwrap().to_toml();
        let doc: toml::Table = text.parse().unwrap();
        let w = doc["train"]["loss_weights"].as_table().unwrap();
        let get = |k: &str| w[k].as_float().unwrap();
        assert_eq!((get("feat"), get("sky"), get("inter"), get("dist")), (0.5, 0.001, 1.0, 0.002));
    }

    #[test]
    fn documents_override_their_preset() {
        let cfg = PipelineConfig::from_toml_str(
            r#"
            preset = "paper"
            seed = 9
            [train]
            iterations = 10
            [train.proposal]
            final_samples = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.preset, "paper");
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.batch_size, 1 << 16);
        assert_eq!(cfg.train.proposal.stage_samples, vec![128, 64]);
        assert_eq!(cfg.train.proposal.final_samples, 16);
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::preset("desk").unwrap());
    }

    #[test]
    fn bad_documents_are_rejected() {
        for text in [
            "preset = \"huge\"",
            "preset = 3",
            "[train]\niterationz = 3",
            "[extract]\nstride = 0",
            "[field]\npreset = \"giant\"",
            "seed = [",
        ] {
            assert!(matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn bounds_pad_camera_centers() {
        let spec = crate::dataset::synthetic::SceneSpec::textured_boxes(8, 8, 2);
        let (m, _) = crate::dataset::synthetic::make_synthetic_scene(&spec).unwrap();
        let mut cfg = PipelineConfig::preset("desk").unwrap();
        cfg.field.margin = 1.0;
        let all: Vec<usize> = (0..m.frames.len()).collect();
        let b = cfg.tile_bounds(&m, &all).unwrap();
        for f in &m.frames {
            let t = f.pose.translation;
            assert!((0..3).all(|a| t[a] >= b.min[a] + 1.0 - 1e-12 && t[a] <= b.max[a] - 1.0 + 1e-12));
        }
        cfg.field.bounds = Some(spec.bounds);
        cfg.resolve_paths(Path::new("/data"));
        assert_eq!(cfg.paths.plan, Path::new("/data/out/plan.json"));
        cfg.resolve_paths(Path::new("/elsewhere"));
        assert_eq!(cfg.paths.plan, Path::new("/data/out/plan.json"));
        assert_eq!(cfg.tile_bounds(&m, &all).unwrap(), spec.bounds);
        assert!(cfg.field_config(spec.bounds, 2).is_ok());
    }
}

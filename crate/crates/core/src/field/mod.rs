//! Neural scene representation for one tile.
//!
//! A [`TileField`] owns several [`SubField`]s (hash grid + trunk MLP + color
//! and feature heads), a direction-only sky MLP, a per-video embedding table
//! and the density-only proposal fields used for importance sampling. Every
//! component exposes a batched forward pass that records what its backward
//! pass needs; gradients are accumulated into a zero-initialized field of the
//! same shape (see [`TileField::zeros_like`]).

mod checkpoint;
mod hashgrid;
mod mlp;
mod sh;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Dtype, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use hashgrid::{HashGrid, HashGridConfig, HashTrace};
pub use mlp::{Linear, Mlp, MlpTrace};
pub use sh::{sh_dim, sh_encode, sh_encode_into, MAX_DEGREE as MAX_SH_DEGREE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

/// Raw density at initialization is offset by this bias, so the initial
/// density is about `softplus(-1) ≈ 0.31` per meter.
pub const DENSITY_BIAS_INIT: f64 = -1.0;
pub const HIDDEN_LAYERS: usize = 2;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalNetConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Main sub-field hash grid; its bounding box is the tile bounds.
    pub grid: HashGridConfig,
    pub hidden_width: usize,
    /// Width of the geometric feature `g` produced by the trunk.
    pub geo_feature_dim: usize,
    /// Semantic feature dimension `D`.
    pub feature_dim: usize,
    pub sh_degree: u32,
    pub embedding_dim: usize,
    pub proposals: Vec<ProposalNetConfig>,
}

impl FieldConfig {
    /// Full-size configuration: 10 levels × 4 features over 2^4..2^14 for the
    /// main field, 8 levels × 1 feature over 2^4..2^10 for the proposals,
    /// 2^20-entry tables and 64-wide MLPs.
    pub fn paper(bounds: Aabb, feature_dim: usize) -> Self {
        let grid = |levels, max_res, features| HashGridConfig {
            num_levels: levels,
            min_resolution: 16,
            max_resolution: max_res,
            features_per_level: features,
            table_capacity: 1 << 20,
            bounding_box: bounds,
        };
        Self {
            grid: grid(10, 1 << 14, 4),
            hidden_width: 64,
            geo_feature_dim: 15,
            feature_dim,
            sh_degree: 4,
            embedding_dim: 16,
            proposals: vec![
                ProposalNetConfig {
                    grid: grid(8, 1 << 10, 1),
                    hidden_width: 64,
                },
                ProposalNetConfig {
                    grid: grid(8, 1 << 10, 1),
                    hidden_width: 64,
                },
            ],
        }
    }

    /// Desk-scale configuration for CPU training on small scenes.
    pub fn desk(bounds: Aabb, feature_dim: usize) -> Self {
        let grid = |levels, min_res, max_res, features, cap| HashGridConfig {
            num_levels: levels,
            min_resolution: min_res,
            max_resolution: max_res,
            features_per_level: features,
            table_capacity: cap,
            bounding_box: bounds,
        };
        Self {
            grid: grid(8, 8, 256, 2, 1 << 15),
            hidden_width: 32,
            geo_feature_dim: 15,
            feature_dim,
            sh_degree: 4,
            embedding_dim: 16,
            proposals: vec![
                ProposalNetConfig {
                    grid: grid(5, 8, 64, 1, 1 << 14),
                    hidden_width: 16,
                },
                ProposalNetConfig {
                    grid: grid(5, 8, 128, 1, 1 << 14),
                    hidden_width: 16,
                },
            ],
        }
    }

    /// Minimal configuration for gradient checks: 2 levels, 16-entry tables.
    pub fn tiny(bounds: Aabb, feature_dim: usize) -> Self {
        let grid = |features| HashGridConfig {
            num_levels: 2,
            min_resolution: 2,
            max_resolution: 4,
            features_per_level: features,
            table_capacity: 16,
            bounding_box: bounds,
        };
        Self {
            grid: grid(2),
            hidden_width: 8,
            geo_feature_dim: 3,
            feature_dim,
            sh_degree: 2,
            embedding_dim: 2,
            proposals: vec![
                ProposalNetConfig {
                    grid: grid(1),
                    hidden_width: 4,
                },
                ProposalNetConfig {
                    grid: grid(1),
                    hidden_width: 4,
                },
            ],
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.grid.bounding_box
    }

    /// Sets the bounding box of every hash grid.
    pub fn with_bounds(mut self, bounds: Aabb) -> Self {
        self.grid.bounding_box = bounds;
        for p in &mut self.proposals {
            p.grid.bounding_box = bounds;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for p in &self.proposals {
            p.grid.validate()?;
            if p.grid.bounding_box != self.grid.bounding_box {
                return Err(Error::InvalidArgument(
                    "proposal grids must share the tile bounding box".into(),
                ));
            }
        }
        if !(1..=sh::MAX_DEGREE).contains(&self.sh_degree) {
            return Err(Error::InvalidArgument(format!(
                "sh_degree must be in 1..=4, got {}",
                self.sh_degree
            )));
        }
        if self.hidden_width == 0 || self.geo_feature_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("field widths must be positive".into()));
        }
        Ok(())
    }

    fn trunk_dims(&self) -> Vec<usize> {
        mlp_dims(self.grid.output_dim(), self.hidden_width, 1 + self.geo_feature_dim)
    }

    fn color_dims(&self) -> Vec<usize> {
        let input = self.geo_feature_dim + sh_dim(self.sh_degree) + self.embedding_dim;
        mlp_dims(input, self.hidden_width, 3)
    }

    fn feature_dims(&self) -> Vec<usize> {
        mlp_dims(self.geo_feature_dim, self.hidden_width, self.feature_dim)
    }

    fn sky_dims(&self) -> Vec<usize> {
        mlp_dims(
            sh_dim(self.sh_degree) + self.embedding_dim,
            self.hidden_width,
            3 + self.feature_dim,
        )
    }
}

fn mlp_dims(input: usize, hidden: usize, output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat_n(hidden, HIDDEN_LAYERS));
    d.push(output);
    d
}

/// Density, color and semantic feature at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// Batched sub-field outputs, row-major per sample.
#[derive(Clone, Debug, Default)]
pub struct SubFieldOutput {
    pub sigma: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SubFieldTape {
    hash: HashTrace,
    raw_density: Vec<f64>,
    trunk: MlpTrace,
    color: MlpTrace,
    feature: MlpTrace,
    color_out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubField {
    pub centroid: Vec3,
    pub grid: HashGrid,
    /// Encoding → `[raw density, g]`.
    pub trunk: Mlp,
    /// `[g, γ(d), V(vid)]` → color logits.
    pub color_head: Mlp,
    /// `g` → semantic feature (linear output).
    pub feature_head: Mlp,
}

impl SubField {
    fn new(config: &FieldConfig, centroid: Vec3, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut trunk = Mlp::new(&config.trunk_dims(), rng);
        trunk.layers.last_mut().unwrap().bias[0] = DENSITY_BIAS_INIT;
        Ok(Self {
            centroid,
            grid: HashGrid::new(config.grid.clone(), rng)?,
            trunk,
            color_head: Mlp::new(&config.color_dims(), rng),
            feature_head: Mlp::new(&config.feature_dims(), rng),
        })
    }

    fn zeros(config: &FieldConfig, centroid: Vec3) -> Result<Self> {
        Ok(Self {
            centroid,
            grid: HashGrid::zeros(config.grid.clone())?,
            trunk: Mlp::zeros(&config.trunk_dims()),
            color_head: Mlp::zeros(&config.color_dims()),
            feature_head: Mlp::zeros(&config.feature_dims()),
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            centroid: self.centroid,
            grid: self.grid.zeros_like(),
            trunk: self.trunk.zeros_like(),
            color_head: self.color_head.zeros_like(),
            feature_head: self.feature_head.zeros_like(),
        }
    }

    fn geo_dim(&self) -> usize {
        self.trunk.out_dim() - 1
    }

    /// Evaluates `points` seen along one direction (`dir_enc` = γ(d)) in one
    /// video (`embedding` = V(vid)).
    pub fn forward(
        &self,
        points: &[Vec3],
        dir_enc: &[f64],
        embedding: &[f64],
    ) -> (SubFieldOutput, SubFieldTape) {
        let n = points.len();
        let enc_dim = self.grid.output_dim();
        let geo = self.geo_dim();
        let mut enc = vec![0.0; n * enc_dim];
        let mut hash = HashTrace::default();
        for (i, p) in points.iter().enumerate() {
            self.grid
                .encode_into(p, &mut enc[i * enc_dim..(i + 1) * enc_dim], Some(&mut hash));
        }
        let trunk = self.trunk.forward(&enc, n);
        let mut raw_density = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        let color_in_dim = self.color_head.in_dim();
        let mut color_in = vec![0.0; n * color_in_dim];
        let mut feat_in = vec![0.0; n * geo];
        for i in 0..n {
            let row = &trunk.output[i * (geo + 1)..(i + 1) * (geo + 1)];
            raw_density.push(row[0]);
            sigma.push(softplus(row[0]));
            let g = &row[1..];
            let c = &mut color_in[i * color_in_dim..(i + 1) * color_in_dim];
            c[..geo].copy_from_slice(g);
            c[geo..geo + dir_enc.len()].copy_from_slice(dir_enc);
            c[geo + dir_enc.len()..].copy_from_slice(embedding);
            feat_in[i * geo..(i + 1) * geo].copy_from_slice(g);
        }
        let color = self.color_head.forward(&color_in, n);
        let feature = self.feature_head.forward(&feat_in, n);
        let color_out: Vec<f64> = color.output.iter().map(|&v| sigmoid(v)).collect();
        let out = SubFieldOutput {
            sigma,
            color: color_out.clone(),
            feature: feature.output.clone(),
        };
        let tape = SubFieldTape {
            hash,
            raw_density,
            trunk,
            color,
            feature,
            color_out,
        };
        (out, tape)
    }

    /// Backpropagates gradients with respect to density, color (after the
    /// sigmoid) and feature of every sample.
    pub fn backward(
        &self,
        tape: &SubFieldTape,
        d_sigma: &[f64],
        d_color: &[f64],
        d_feature: &[f64],
        grads: &mut SubField,
        d_embedding: &mut [f64],
    ) {
        let n = tape.raw_density.len();
        let geo = self.geo_dim();
        let d_color_logit: Vec<f64> = d_color
            .iter()
            .zip(&tape.color_out)
            .map(|(d, c)| d * c * (1.0 - c))
            .collect();
        let d_color_in = self
            .color_head
            .backward(&tape.color, &d_color_logit, &mut grads.color_head, true)
            .unwrap();
        let d_feat_in = self
            .feature_head
            .backward(&tape.feature, d_feature, &mut grads.feature_head, true)
            .unwrap();
        let color_in_dim = self.color_head.in_dim();
        let emb_off = color_in_dim - d_embedding.len();
        let mut d_trunk = vec![0.0; n * (geo + 1)];
        for i in 0..n {
            let row = &mut d_trunk[i * (geo + 1)..(i + 1) * (geo + 1)];
            row[0] = d_sigma[i] * sigmoid(tape.raw_density[i]);
            let dc = &d_color_in[i * color_in_dim..(i + 1) * color_in_dim];
            let df = &d_feat_in[i * geo..(i + 1) * geo];
            for k in 0..geo {
                row[1 + k] = dc[k] + df[k];
            }
            for (de, v) in d_embedding.iter_mut().zip(&dc[emb_off..]) {
                *de += v;
            }
        }
        let d_enc = self
            .trunk
            .backward(&tape.trunk, &d_trunk, &mut grads.trunk, true)
            .unwrap();
        self.grid.backward(&tape.hash, &d_enc, &mut grads.grid);
    }
}

#[derive(Clone, Debug, Default)]
pub struct ProposalTape {
    hash: HashTrace,
    raw_density: Vec<f64>,
    trunk: MlpTrace,
}

/// Density-only field used to place samples for the next stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalField {
    pub grid: HashGrid,
    pub trunk: Mlp,
}

impl ProposalField {
    fn dims(cfg: &ProposalNetConfig) -> Vec<usize> {
        mlp_dims(cfg.grid.output_dim(), cfg.hidden_width, 1)
    }

    fn new(cfg: &ProposalNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut trunk = Mlp::new(&Self::dims(cfg), rng);
        trunk.layers.last_mut().unwrap().bias[0] = DENSITY_BIAS_INIT;
        Ok(Self {
            grid: HashGrid::new(cfg.grid.clone(), rng)?,
            trunk,
        })
    }

    fn zeros(cfg: &ProposalNetConfig) -> Result<Self> {
        Ok(Self {
            grid: HashGrid::zeros(cfg.grid.clone())?,
            trunk: Mlp::zeros(&Self::dims(cfg)),
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            grid: self.grid.zeros_like(),
            trunk: self.trunk.zeros_like(),
        }
    }

    pub fn density(&self, x: &Vec3) -> f64 {
        softplus(self.trunk.forward_one(&self.grid.encode(x))[0])
    }

    pub fn forward(&self, points: &[Vec3]) -> (Vec<f64>, ProposalTape) {
        let n = points.len();
        let dim = self.grid.output_dim();
        let mut enc = vec![0.0; n * dim];
        let mut hash = HashTrace::default();
        for (i, p) in points.iter().enumerate() {
            self.grid
                .encode_into(p, &mut enc[i * dim..(i + 1) * dim], Some(&mut hash));
        }
        let trunk = self.trunk.forward(&enc, n);
        let raw_density = trunk.output.clone();
        let sigma = raw_density.iter().map(|&r| softplus(r)).collect();
        (
            sigma,
            ProposalTape {
                hash,
                raw_density,
                trunk,
            },
        )
    }

    pub fn backward(&self, tape: &ProposalTape, d_sigma: &[f64], grads: &mut ProposalField) {
        let d_raw: Vec<f64> = d_sigma
            .iter()
            .zip(&tape.raw_density)
            .map(|(d, &r)| d * sigmoid(r))
            .collect();
        let d_enc = self
            .trunk
            .backward(&tape.trunk, &d_raw, &mut grads.trunk, true)
            .unwrap();
        self.grid.backward(&tape.hash, &d_enc, &mut grads.grid);
    }
}

/// Per-video appearance codes, one row per registered video id.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbeddings {
    /// Sorted, unique.
    pub ids: Vec<u32>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl VideoEmbeddings {
    pub fn zeros(ids: &[u32], dim: usize) -> Self {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Self {
            data: vec![0.0; ids.len() * dim],
            ids,
            dim,
        }
    }

    pub fn index(&self, vid: u32) -> Result<usize> {
        self.ids
            .binary_search(&vid)
            .map_err(|_| Error::InvalidArgument(format!("unknown video id {vid}")))
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }
}

#[derive(Clone, Debug, Default)]
pub struct SkyTape {
    trunk: MlpTrace,
    color: [f64; 3],
}

/// A named view of one learnable tensor.
pub struct Param<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileField {
    pub config: FieldConfig,
    pub subfields: Vec<SubField>,
    /// `[γ(d), V(vid)]` → `[color logits (3), feature (D)]`.
    pub sky: Mlp,
    pub embeddings: VideoEmbeddings,
    pub proposals: Vec<ProposalField>,
}

impl TileField {
    /// Randomly initialized field with one sub-field per centroid and one
    /// embedding row per video id.
    pub fn new(config: FieldConfig, centroids: &[Vec3], video_ids: &[u32], seed: u64) -> Result<Self> {
        config.validate()?;
        if centroids.is_empty() {
            return Err(Error::InvalidArgument("a tile needs at least one sub-field".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subfields = centroids
            .iter()
            .map(|c| SubField::new(&config, *c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let sky = Mlp::new(&config.sky_dims(), &mut rng);
        let proposals = config
            .proposals
            .iter()
            .map(|p| ProposalField::new(p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings: VideoEmbeddings::zeros(video_ids, config.embedding_dim),
            config,
            subfields,
            sky,
            proposals,
        })
    }

    /// All-zero field with the given structure.
    pub fn zeros(config: FieldConfig, centroids: &[Vec3], video_ids: &[u32]) -> Result<Self> {
        config.validate()?;
        if centroids.is_empty() {
            return Err(Error::InvalidArgument("a tile needs at least one sub-field".into()));
        }
        let subfields = centroids
            .iter()
            .map(|c| SubField::zeros(&config, *c))
            .collect::<Result<Vec<_>>>()?;
        let proposals = config
            .proposals
            .iter()
            .map(ProposalField::zeros)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sky: Mlp::zeros(&config.sky_dims()),
            embeddings: VideoEmbeddings::zeros(video_ids, config.embedding_dim),
            config,
            subfields,
            proposals,
        })
    }

    /// Same structure, every learnable value zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            subfields: self.subfields.iter().map(SubField::zeros_like).collect(),
            sky: self.sky.zeros_like(),
            embeddings: VideoEmbeddings::zeros(&self.embeddings.ids, self.embeddings.dim),
            proposals: self.proposals.iter().map(ProposalField::zeros_like).collect(),
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.config.bounds()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        self.subfields.iter().map(|s| s.centroid).collect()
    }

    pub fn direction_encoding(&self, d: &Vec3) -> Vec<f64> {
        sh_encode(&[d[0], d[1], d[2]], self.config.sh_degree)
    }

    /// Nearest sub-field centroid; ties go to the lowest index.
    pub fn assign_subfield(&self, x: &Vec3) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, s) in self.subfields.iter().enumerate() {
            let d = (x - s.centroid).norm();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn query_subfield(&self, index: usize, x: &Vec3, d: &Vec3, vid: u32) -> Result<FieldSample> {
        let sf = self
            .subfields
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no sub-field {index}")))?;
        let emb = self.embeddings.row(self.embeddings.index(vid)?);
        let (out, _) = sf.forward(std::slice::from_ref(x), &self.direction_encoding(d), emb);
        Ok(FieldSample {
            sigma: out.sigma[0],
            color: [out.color[0], out.color[1], out.color[2]],
            feature: out.feature,
        })
    }

    /// Queries the sub-field nearest to `x`.
    pub fn query(&self, x: &Vec3, d: &Vec3, vid: u32) -> Result<FieldSample> {
        self.query_subfield(self.assign_subfield(x), x, d, vid)
    }

    pub fn sky_forward(&self, dir_enc: &[f64], embedding: &[f64]) -> ([f64; 3], Vec<f64>, SkyTape) {
        let mut input = Vec::with_capacity(dir_enc.len() + embedding.len());
        input.extend_from_slice(dir_enc);
        input.extend_from_slice(embedding);
        let trunk = self.sky.forward(&input, 1);
        let color = [
            sigmoid(trunk.output[0]),
            sigmoid(trunk.output[1]),
            sigmoid(trunk.output[2]),
        ];
        let feature = trunk.output[3..].to_vec();
        (color, feature, SkyTape { trunk, color })
    }

    pub fn sky_backward(
        &self,
        tape: &SkyTape,
        d_color: &[f64; 3],
        d_feature: &[f64],
        grads: &mut Mlp,
        d_embedding: &mut [f64],
    ) {
        let mut d_out = Vec::with_capacity(3 + d_feature.len());
        for c in 0..3 {
            d_out.push(d_color[c] * tape.color[c] * (1.0 - tape.color[c]));
        }
        d_out.extend_from_slice(d_feature);
        let d_in = self.sky.backward(&tape.trunk, &d_out, grads, true).unwrap();
        let off = d_in.len() - d_embedding.len();
        for (de, v) in d_embedding.iter_mut().zip(&d_in[off..]) {
            *de += v;
        }
    }

    /// Sky color and feature for direction `d` in video `vid`.
    pub fn query_sky(&self, d: &Vec3, vid: u32) -> Result<([f64; 3], Vec<f64>)> {
        let emb = self.embeddings.row(self.embeddings.index(vid)?);
        let (c, f, _) = self.sky_forward(&self.direction_encoding(d), emb);
        Ok((c, f))
    }

    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (i, sf) in self.subfields.iter().enumerate() {
            push_grid(&format!("subfield.{i}.grid"), &sf.grid, &mut out);
            push_mlp(&format!("subfield.{i}.trunk"), &sf.trunk, &mut out);
            push_mlp(&format!("subfield.{i}.color_head"), &sf.color_head, &mut out);
            push_mlp(&format!("subfield.{i}.feature_head"), &sf.feature_head, &mut out);
        }
        push_mlp("sky", &self.sky, &mut out);
        out.push(Param {
            name: "video_embeddings".into(),
            shape: vec![self.embeddings.ids.len(), self.embeddings.dim],
            data: &self.embeddings.data,
        });
        for (i, p) in self.proposals.iter().enumerate() {
            push_grid(&format!("proposal.{i}.grid"), &p.grid, &mut out);
            push_mlp(&format!("proposal.{i}.trunk"), &p.trunk, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, sf) in self.subfields.iter_mut().enumerate() {
            push_grid_mut(&format!("subfield.{i}.grid"), &mut sf.grid, &mut out);
            push_mlp_mut(&format!("subfield.{i}.trunk"), &mut sf.trunk, &mut out);
            push_mlp_mut(&format!("subfield.{i}.color_head"), &mut sf.color_head, &mut out);
            push_mlp_mut(&format!("subfield.{i}.feature_head"), &mut sf.feature_head, &mut out);
        }
        push_mlp_mut("sky", &mut self.sky, &mut out);
        out.push(ParamMut {
            name: "video_embeddings".into(),
            shape: vec![self.embeddings.ids.len(), self.embeddings.dim],
            data: &mut self.embeddings.data,
        });
        for (i, p) in self.proposals.iter_mut().enumerate() {
            push_grid_mut(&format!("proposal.{i}.grid"), &mut p.grid, &mut out);
            push_mlp_mut(&format!("proposal.{i}.trunk"), &mut p.trunk, &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for p in self.params_mut() {
            p.data.fill(value);
        }
    }

    /// `self += other` for a field of identical structure.
    pub fn add_assign(&mut self, other: &TileField) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn push_grid<'a>(prefix: &str, g: &'a HashGrid, out: &mut Vec<Param<'a>>) {
    let f = g.config.features_per_level;
    for (l, t) in g.tables.iter().enumerate() {
        out.push(Param {
            name: format!("{prefix}.level.{l}"),
            shape: vec![t.len() / f, f],
            data: t,
        });
    }
}

fn push_grid_mut<'a>(prefix: &str, g: &'a mut HashGrid, out: &mut Vec<ParamMut<'a>>) {
    let f = g.config.features_per_level;
    for (l, t) in g.tables.iter_mut().enumerate() {
        out.push(ParamMut {
            name: format!("{prefix}.level.{l}"),
            shape: vec![t.len() / f, f],
            data: t,
        });
    }
}

fn push_mlp<'a>(prefix: &str, m: &'a Mlp, out: &mut Vec<Param<'a>>) {
    for (k, l) in m.layers.iter().enumerate() {
        out.push(Param {
            name: format!("{prefix}.{k}.weight"),
            shape: vec![l.out_dim, l.in_dim],
            data: &l.weight,
        });
        out.push(Param {
            name: format!("{prefix}.{k}.bias"),
            shape: vec![l.out_dim],
            data: &l.bias,
        });
    }
}

fn push_mlp_mut<'a>(prefix: &str, m: &'a mut Mlp, out: &mut Vec<ParamMut<'a>>) {
    for (k, l) in m.layers.iter_mut().enumerate() {
        let Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        } = l;
        out.push(ParamMut {
            name: format!("{prefix}.{k}.weight"),
            shape: vec![*out_dim, *in_dim],
            data: weight,
        });
        out.push(ParamMut {
            name: format!("{prefix}.{k}.bias"),
            shape: vec![*out_dim],
            data: bias,
        });
    }
}

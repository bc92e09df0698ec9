//! Ray sampling, nearest-sub-field routing and volumetric compositing.
//!
//! A ray is first clipped to the tile box ∩ `[near, far]`. Each proposal
//! stage places depths (uniformly for the first, by resampling the previous
//! stage's weights afterwards) and composites proposal densities only. The
//! final stage resamples once more and composites the full field, blending
//! in the sky by the residual transmittance. Resampling is not
//! differentiated through.

mod composite;
mod sampling;

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use composite::{interval_widths, Compositing};
pub use sampling::{resample_from_weights, sample_uniform};

use crate::dataset::{quantize, CameraFrame, FeatureMap, Ray};
use crate::error::{Error, Result};
use crate::field::{ProposalTape, SkyTape, SubFieldTape, TileField};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Samples per proposal stage; one entry per proposal field.
    pub stage_samples: Vec<usize>,
    pub final_samples: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            stage_samples: vec![128, 64],
            final_samples: 32,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self, tile: &TileField) -> Result<()> {
        if self.stage_samples.len() != tile.proposals.len() {
            return Err(Error::Config(format!(
                "{} proposal stages configured but the tile has {} proposal fields",
                self.stage_samples.len(),
                tile.proposals.len()
            )));
        }
        if self.final_samples < 2 || self.stage_samples.iter().any(|&n| n < 2) {
            return Err(Error::Config("every stage needs at least 2 samples".into()));
        }
        Ok(())
    }
}

/// Density-only compositing of one proposal stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalStage {
    pub depths: Vec<f64>,
    pub t_end: f64,
    pub sigma: Vec<f64>,
    pub comp: Compositing,
}

/// Everything the final stage computed for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleBatch {
    pub depths: Vec<f64>,
    /// Clipped near bound.
    pub t_start: f64,
    /// End of the last sample interval (clipped far bound).
    pub t_end: f64,
    pub points: Vec<Vec3>,
    pub subfield: Vec<usize>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// `N × D`, row-major.
    pub feature: Vec<f64>,
    pub comp: Compositing,
    pub sky_color: [f64; 3],
    pub sky_feature: Vec<f64>,
    pub rgb: [f64; 3],
    pub rendered_feature: Vec<f64>,
    pub opacity: f64,
}

impl RaySampleBatch {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.comp.weights
    }

    pub fn feature_at(&self, i: usize) -> &[f64] {
        let d = self.sky_feature.len();
        &self.feature[i * d..(i + 1) * d]
    }

    /// `Σ wⁱ tⁱ / max(O, ε)`.
    pub fn expected_depth(&self) -> f64 {
        let s: f64 = self.comp.weights.iter().zip(&self.depths).map(|(w, t)| w * t).sum();
        s / self.opacity.max(1e-10)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedRay {
    pub stages: Vec<ProposalStage>,
    pub final_batch: RaySampleBatch,
}

#[derive(Debug)]
struct Group {
    subfield: usize,
    samples: Vec<usize>,
    tape: SubFieldTape,
}

/// What [`backward_ray`] needs from the forward pass.
#[derive(Debug)]
pub struct RayTape {
    embedding: usize,
    groups: Vec<Group>,
    sky: SkyTape,
    stages: Vec<ProposalTape>,
}

/// Loss gradients with respect to one ray's outputs.
#[derive(Clone, Debug, Default)]
pub struct RayAdjoint {
    pub d_rgb: [f64; 3],
    pub d_feature: Vec<f64>,
    pub d_opacity: f64,
    /// Extra gradient on the final weights (distortion); may be empty.
    pub d_weights: Vec<f64>,
    /// Gradient on each proposal stage's weights (interlevel); may be empty.
    pub d_stage_weights: Vec<Vec<f64>>,
}

fn check_depths(ray: &Ray, depths: &[f64]) -> Result<()> {
    if depths.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("sample depths must be sorted ascending".into()));
    }
    if depths.iter().any(|&t| !(t >= ray.near && t <= ray.far)) {
        return Err(Error::InvalidArgument(format!(
            "sample depths must lie in [{}, {}]",
            ray.near, ray.far
        )));
    }
    Ok(())
}

fn shade(tile: &TileField, ray: &Ray, depths: &[f64], emb: usize, tape: bool) -> (RaySampleBatch, RayTape) {
    let n = depths.len();
    let dim = tile.feature_dim();
    let dir_enc = tile.direction_encoding(&ray.direction);
    let embedding = tile.embeddings.row(emb);
    let points: Vec<Vec3> = depths.iter().map(|&t| ray.at(t)).collect();
    let subfield: Vec<usize> = points.iter().map(|p| tile.assign_subfield(p)).collect();
    let mut sigma = vec![0.0; n];
    let mut color = vec![[0.0; 3]; n];
    let mut feature = vec![0.0; n * dim];
    let mut groups = Vec::new();
    for (j, sf) in tile.subfields.iter().enumerate() {
        let samples: Vec<usize> = (0..n).filter(|&i| subfield[i] == j).collect();
        if samples.is_empty() {
            continue;
        }
        let pts: Vec<Vec3> = samples.iter().map(|&i| points[i]).collect();
        let (out, t) = sf.forward(&pts, &dir_enc, embedding);
        for (r, &i) in samples.iter().enumerate() {
            sigma[i] = out.sigma[r];
            color[i].copy_from_slice(&out.color[r * 3..r * 3 + 3]);
            feature[i * dim..(i + 1) * dim].copy_from_slice(&out.feature[r * dim..(r + 1) * dim]);
        }
        if tape {
            groups.push(Group {
                subfield: j,
                samples,
                tape: t,
            });
        }
    }
    let comp = Compositing::new(depths, ray.far, &sigma);
    let (sky_color, sky_feature, sky_tape) = tile.sky_forward(&dir_enc, embedding);
    let opacity = comp.opacity();
    let residual = 1.0 - opacity;
    let mut rgb = [0.0; 3];
    let mut rendered_feature = vec![0.0; dim];
    for i in 0..n {
        let w = comp.weights[i];
        for c in 0..3 {
            rgb[c] += w * color[i][c];
        }
        for (o, f) in rendered_feature.iter_mut().zip(&feature[i * dim..(i + 1) * dim]) {
            *o += w * f;
        }
    }
    for c in 0..3 {
        rgb[c] += residual * sky_color[c];
    }
    for (o, f) in rendered_feature.iter_mut().zip(&sky_feature) {
        *o += residual * f;
    }
    let batch = RaySampleBatch {
        depths: depths.to_vec(),
        t_start: ray.near,
        t_end: ray.far,
        points,
        subfield,
        sigma,
        color,
        feature,
        comp,
        sky_color,
        sky_feature,
        rgb,
        rendered_feature,
        opacity,
    };
    let tape = RayTape {
        embedding: emb,
        groups,
        sky: sky_tape,
        stages: Vec::new(),
    };
    (batch, tape)
}

/// Composites the full field at the given sorted depths. The last interval
/// ends at `ray.far`.
pub fn composite(tile: &TileField, ray: &Ray, depths: &[f64]) -> Result<RaySampleBatch> {
    check_depths(ray, depths)?;
    let emb = tile.embeddings.index(ray.video_id)?;
    Ok(shade(tile, ray, depths, emb, false).0)
}

fn march(
    tile: &TileField,
    ray: &Ray,
    cfg: &ProposalConfig,
    mut rng: Option<&mut ChaCha8Rng>,
    tape: bool,
) -> Result<(RenderedRay, RayTape)> {
    cfg.validate(tile)?;
    let emb = tile.embeddings.index(ray.video_id)?;
    let bounds = tile.bounds();
    let clipped = bounds
        .clip_ray(&ray.origin, &ray.direction, ray.near, ray.far)
        .map(|(t0, t1)| ray.clone().with_range(t0, t1));
    let Some(clipped) = clipped else {
        // misses the tile: only the sky is seen
        let (batch, t) = shade(tile, ray, &[], emb, tape);
        let stages = vec![];
        return Ok((RenderedRay { stages, final_batch: batch }, t));
    };
    let (t0, t1) = (clipped.near, clipped.far);
    let mut stages = Vec::with_capacity(cfg.stage_samples.len());
    let mut stage_tapes = Vec::new();
    for (s, &n) in cfg.stage_samples.iter().enumerate() {
        let depths = match stages.last() {
            None => sample_uniform(t0, t1, n, rng.as_deref_mut()),
            Some(prev @ ProposalStage { .. }) => {
                resample_from_weights(&prev.depths, &prev.comp.weights, t1, n, rng.as_deref_mut())
            }
        };
        let points: Vec<Vec3> = depths.iter().map(|&t| clipped.at(t)).collect();
        let (sigma, pt) = tile.proposals[s].forward(&points);
        let comp = Compositing::new(&depths, t1, &sigma);
        if tape {
            stage_tapes.push(pt);
        }
        stages.push(ProposalStage {
            depths,
            t_end: t1,
            sigma,
            comp,
        });
    }
    let depths = match stages.last() {
        None => sample_uniform(t0, t1, cfg.final_samples, rng.as_deref_mut()),
        Some(prev) => resample_from_weights(&prev.depths, &prev.comp.weights, t1, cfg.final_samples, rng),
    };
    let (final_batch, mut t) = shade(tile, &clipped, &depths, emb, tape);
    t.stages = stage_tapes;
    Ok((RenderedRay { stages, final_batch }, t))
}

/// Proposal stages followed by the full-field composite. Depths are bin
/// midpoints / deterministic quantiles unless `rng` is given.
pub fn render_ray(
    tile: &TileField,
    ray: &Ray,
    cfg: &ProposalConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<RenderedRay> {
    Ok(march(tile, ray, cfg, rng, false)?.0)
}

/// [`render_ray`] plus the record needed by [`backward_ray`].
pub fn trace_ray(
    tile: &TileField,
    ray: &Ray,
    cfg: &ProposalConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(RenderedRay, RayTape)> {
    march(tile, ray, cfg, rng, true)
}

/// Re-evaluates `template` at its own sample depths, so that only the
/// field parameters differ. Used to probe gradients with resampling held
/// fixed.
pub fn rerender(tile: &TileField, ray: &Ray, template: &RenderedRay) -> Result<RenderedRay> {
    let fb = &template.final_batch;
    let clipped = ray.clone().with_range(fb.t_start, fb.t_end);
    let mut stages = Vec::with_capacity(template.stages.len());
    for (s, st) in template.stages.iter().enumerate() {
        let points: Vec<Vec3> = st.depths.iter().map(|&t| clipped.at(t)).collect();
        let (sigma, _) = tile.proposals[s].forward(&points);
        stages.push(ProposalStage {
            depths: st.depths.clone(),
            t_end: st.t_end,
            comp: Compositing::new(&st.depths, st.t_end, &sigma),
            sigma,
        });
    }
    let emb = tile.embeddings.index(ray.video_id)?;
    let (final_batch, _) = shade(tile, &clipped, &fb.depths, emb, false);
    Ok(RenderedRay { stages, final_batch })
}

/// Accumulates parameter gradients of one ray into `grads`.
pub fn backward_ray(
    tile: &TileField,
    rendered: &RenderedRay,
    tape: &RayTape,
    adj: &RayAdjoint,
    grads: &mut TileField,
) {
    let b = &rendered.final_batch;
    let dim = tile.feature_dim();
    let n = b.len();
    let mut d_w = vec![0.0; n];
    for i in 0..n {
        let mut g = adj.d_opacity;
        for c in 0..3 {
            g += adj.d_rgb[c] * (b.color[i][c] - b.sky_color[c]);
        }
        for (k, df) in adj.d_feature.iter().enumerate() {
            g += df * (b.feature[i * dim + k] - b.sky_feature[k]);
        }
        if let Some(x) = adj.d_weights.get(i) {
            g += x;
        }
        d_w[i] = g;
    }
    let d_sigma = b.comp.sigma_gradient(&d_w);
    let mut d_emb = vec![0.0; tile.embeddings.dim];
    let has_feature = !adj.d_feature.is_empty();
    for group in &tape.groups {
        let m = group.samples.len();
        let mut ds = Vec::with_capacity(m);
        let mut dc = Vec::with_capacity(m * 3);
        let mut df = vec![0.0; m * dim];
        for (r, &i) in group.samples.iter().enumerate() {
            let w = b.comp.weights[i];
            ds.push(d_sigma[i]);
            dc.extend(adj.d_rgb.iter().map(|g| g * w));
            if has_feature {
                for k in 0..dim {
                    df[r * dim + k] = adj.d_feature[k] * w;
                }
            }
        }
        tile.subfields[group.subfield].backward(
            &group.tape,
            &ds,
            &dc,
            &df,
            &mut grads.subfields[group.subfield],
            &mut d_emb,
        );
    }
    let residual = 1.0 - b.opacity;
    let d_sky_c = adj.d_rgb.map(|g| g * residual);
    let d_sky_f: Vec<f64> = if has_feature {
        adj.d_feature.iter().map(|g| g * residual).collect()
    } else {
        vec![0.0; dim]
    };
    tile.sky_backward(&tape.sky, &d_sky_c, &d_sky_f, &mut grads.sky, &mut d_emb);
    for (g, v) in grads.embeddings.row_mut(tape.embedding).iter_mut().zip(&d_emb) {
        *g += v;
    }
    for (s, stage) in rendered.stages.iter().enumerate() {
        let Some(dw) = adj.d_stage_weights.get(s).filter(|d| !d.is_empty()) else {
            continue;
        };
        let ds = stage.comp.sigma_gradient(dw);
        tile.proposals[s].backward(&tape.stages[s], &ds, &mut grads.proposals[s]);
    }
}

/// Per-pixel render of a whole camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub feature_dim: usize,
    /// `H × W × 3`.
    pub rgb: Vec<f64>,
    /// `H × W × D`.
    pub feature: Vec<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

pub fn render_image(
    tile: &TileField,
    frame: &CameraFrame,
    cfg: &ProposalConfig,
    near: f64,
    far: f64,
) -> Result<RenderedImage> {
    cfg.validate(tile)?;
    tile.embeddings.index(frame.video_id)?;
    let (w, h) = (frame.width(), frame.height());
    let dim = tile.feature_dim();
    let rows: Vec<Vec<RaySampleBatch>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let ray = frame.pixel_to_ray(row, col, near, far)?;
                    Ok(render_ray(tile, &ray, cfg, None)?.final_batch)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut img = RenderedImage {
        width: w,
        height: h,
        feature_dim: dim,
        rgb: Vec::with_capacity((w * h * 3) as usize),
        feature: Vec::with_capacity((w * h) as usize * dim),
        opacity: Vec::with_capacity((w * h) as usize),
        depth: Vec::with_capacity((w * h) as usize),
    };
    for b in rows.iter().flatten() {
        img.rgb.extend_from_slice(&b.rgb);
        img.feature.extend_from_slice(&b.rendered_feature);
        img.opacity.push(b.opacity);
        img.depth.push(b.expected_depth());
    }
    Ok(img)
}

fn depth_color(v: f64) -> [u8; 3] {
    // blue → cyan → yellow → red
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.6], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let x = v.clamp(0.0, 1.0) * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = quantize((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) as f32);
    }
    out
}

impl RenderedImage {
    /// Writes `{stem}_rgb.png`, `{stem}_opacity.png`, `{stem}_depth.png`
    /// (colormapped over `[0, max_depth]`) and `{stem}.feat`.
    pub fn save(&self, dir: &Path, stem: &str, max_depth: f64) -> Result<()> {
        let (w, h) = (self.width, self.height);
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let i = ((y * w + x) * 3) as usize;
            image::Rgb([0, 1, 2].map(|c| quantize(self.rgb[i + c] as f32)))
        });
        let opacity = GrayImage::from_fn(w, h, |x, y| {
            image::Luma([quantize(self.opacity[(y * w + x) as usize] as f32)])
        });
        let depth = RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            if self.opacity[i] < 1e-3 {
                image::Rgb([0, 0, 0])
            } else {
                image::Rgb(depth_color(self.depth[i] / max_depth))
            }
        });
        let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, name: String| {
            let path = dir.join(name);
            img(&path).map_err(|source| Error::Image { path, source })
        };
        save(&|p| rgb.save(p), format!("{stem}_rgb.png"))?;
        save(&|p| opacity.save(p), format!("{stem}_opacity.png"))?;
        save(&|p| depth.save(p), format!("{stem}_depth.png"))?;
        let mut fm = FeatureMap::zeros(h, w, self.feature_dim as u32);
        for (o, v) in fm.data.iter_mut().zip(&self.feature) {
            *o = *v as f32;
        }
        fm.write(&dir.join(format!("{stem}.feat")))
    }
}

#[cfg(test)]
mod tests;

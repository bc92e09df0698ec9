//! Tile optimization: masked ray batches, the five-term loss, AdamW with a
//! stepped learning rate, metrics and checkpoints.

mod losses;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use losses::{
    distortion_loss, distortion_ray, feat_loss, interlevel_loss, interlevel_ray, mse, rgb_loss,
    sky_loss, sky_ray, total_loss, LossBreakdown, LossWeights, INTERLEVEL_EPS, SKY_EPS,
};
pub use optim::{clip_global_norm, milestone_step, scheduled_lr, AdamW, AdamWConfig, Moments};

use crate::dataset::{splitmix64, DatasetManifest, PixelPool, RaySample};
use crate::error::{Error, Result};
use crate::field::{save_checkpoint, Dtype, TileField};
use crate::render::{backward_ray, render_ray, trace_ray, ProposalConfig, RayAdjoint, RenderedRay};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Fractions of `iterations` at which the learning rate is multiplied
    /// by `lr_decay`.
    pub milestones: Vec<f64>,
    pub adam: AdamWConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub proposal: ProposalConfig,
    /// Jitter sample depths within their bins during training.
    pub stratified: bool,
    /// Gradient partitions per batch, each merged in a fixed order;
    /// 0 uses the rayon pool size. Results are bit-identical for a fixed
    /// value.
    pub workers: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// 0 evaluates only after the last iteration.
    pub eval_every: usize,
    /// Hold out roughly one in this many pixels for evaluation; 0 = none.
    pub holdout_every: u64,
    /// Upper bound on held-out rays rendered per evaluation.
    pub eval_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 1024,
            lr: 0.01,
            lr_decay: 0.33,
            milestones: vec![0.25, 0.5, 0.75],
            adam: AdamWConfig::default(),
            grad_clip: 10.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            proposal: ProposalConfig::default(),
            stratified: true,
            workers: 0,
            checkpoint_every: 0,
            eval_every: 0,
            holdout_every: 50,
            eval_rays: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr must be ≥ 0 and grad_clip > 0".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("milestones are fractions in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        scheduled_lr(self.lr, self.lr_decay, &self.milestones, self.iterations, step)
    }

    fn resolved_workers(&self) -> usize {
        if self.workers == 0 {
            rayon::current_num_threads()
        } else {
            self.workers
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub rays: usize,
    pub rgb_mse: f64,
    pub psnr: f64,
    pub feature_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub total: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    pub final_eval: Option<EvalMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where training writes its side outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub metrics_csv: Option<&'a Path>,
}

/// Loss terms of one ray (each already divided by the batch size) and the
/// gradient of the weighted total with respect to the ray's outputs.
pub fn ray_terms(r: &RenderedRay, sample: &RaySample, w: &LossWeights, scale: f64) -> (LossBreakdown, RayAdjoint) {
    let b = &r.final_batch;
    let mut terms = LossBreakdown::default();
    let mut adj = RayAdjoint::default();
    for c in 0..3 {
        let d = b.rgb[c] - sample.target_rgb[c] as f64;
        terms.rgb += d * d / 3.0 * scale;
        adj.d_rgb[c] = 2.0 * d / 3.0 * scale;
    }
    let dim = b.rendered_feature.len() as f64;
    adj.d_feature = Vec::with_capacity(b.rendered_feature.len());
    for (p, t) in b.rendered_feature.iter().zip(&sample.target_feature) {
        let d = p - *t as f64;
        terms.feat += d * d / dim * scale;
        adj.d_feature.push(w.feat * 2.0 * d / dim * scale);
    }
    let (l, g) = sky_ray(b.opacity, sample.is_sky);
    terms.sky = l * scale;
    adj.d_opacity = w.sky * g * scale;
    for s in &r.stages {
        let (l, g) = interlevel_ray(&s.depths, &s.comp.weights, s.t_end, &b.depths, &b.comp.weights, b.t_end);
        terms.inter += l * scale;
        adj.d_stage_weights.push(g.into_iter().map(|v| v * w.inter * scale).collect());
    }
    let (l, g) = distortion_ray(&b.depths, &b.comp.weights, b.t_start, b.t_end);
    terms.dist = l * scale;
    adj.d_weights = g.into_iter().map(|v| v * w.dist * scale).collect();
    (terms, adj)
}

/// Batch loss terms for already rendered rays.
pub fn batch_terms(samples: &[RaySample], rendered: &[RenderedRay], w: &LossWeights) -> LossBreakdown {
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut total = LossBreakdown::default();
    for (s, r) in samples.iter().zip(rendered) {
        total.add(&ray_terms(r, s, w, scale).0);
    }
    total
}

fn ray_rng(seed: Option<u64>, index: usize) -> Option<ChaCha8Rng> {
    seed.map(|s| ChaCha8Rng::seed_from_u64(splitmix64(s ^ splitmix64(index as u64))))
}

/// Loss and parameter gradients of one batch. The batch is cut into
/// `buffers.len()` contiguous parts, each accumulated into its own buffer;
/// the parts are then summed into `buffers[0]` in order. With `seed`, depths
/// are stratified per ray from a seed derived from `(seed, ray index)`.
pub fn batch_gradients_into(
    tile: &TileField,
    samples: &[RaySample],
    proposal: &ProposalConfig,
    weights: &LossWeights,
    seed: Option<u64>,
    buffers: &mut [TileField],
) -> Result<LossBreakdown> {
    assert!(!buffers.is_empty());
    let parts = buffers.len();
    let n = samples.len();
    let scale = 1.0 / n.max(1) as f64;
    let results: Vec<Result<LossBreakdown>> = buffers
        .par_iter_mut()
        .enumerate()
        .map(|(c, grads)| {
            grads.fill(0.0);
            let mut terms = LossBreakdown::default();
            for i in c * n / parts..(c + 1) * n / parts {
                let mut rng = ray_rng(seed, i);
                let (r, tape) = trace_ray(tile, &samples[i].ray, proposal, rng.as_mut())?;
                let (t, adj) = ray_terms(&r, &samples[i], weights, scale);
                terms.add(&t);
                backward_ray(tile, &r, &tape, &adj, grads);
            }
            Ok(terms)
        })
        .collect();
    let mut total = LossBreakdown::default();
    for r in results {
        total.add(&r?);
    }
    let (head, rest) = buffers.split_at_mut(1);
    for g in rest.iter() {
        head[0].add_assign(g);
    }
    Ok(total)
}

/// Single-buffer convenience wrapper around [`batch_gradients_into`].
pub fn batch_gradients(
    tile: &TileField,
    samples: &[RaySample],
    proposal: &ProposalConfig,
    weights: &LossWeights,
    seed: Option<u64>,
) -> Result<(LossBreakdown, TileField)> {
    let mut buf = [tile.zeros_like()];
    let terms = batch_gradients_into(tile, samples, proposal, weights, seed, &mut buf)?;
    let [g] = buf;
    Ok((terms, g))
}

/// Renders up to `max_rays` pooled pixels (evenly strided through the pool)
/// with deterministic depths and compares against their targets.
pub fn evaluate(
    tile: &TileField,
    manifest: &DatasetManifest,
    pool: &PixelPool,
    proposal: &ProposalConfig,
    max_rays: usize,
) -> Result<Option<EvalMetrics>> {
    if pool.is_empty() || max_rays == 0 {
        return Ok(None);
    }
    let count = pool.len().min(max_rays);
    let picks: Vec<usize> = (0..count).map(|k| k * pool.len() / count).collect();
    let errs: Vec<(f64, f64)> = picks
        .par_iter()
        .map(|&k| {
            let (f, p) = pool.get(k);
            let s = pool.ray_sample(manifest, f, p);
            let b = render_ray(tile, &s.ray, proposal, None)?.final_batch;
            let c: f64 = (0..3).map(|i| (b.rgb[i] - s.target_rgb[i] as f64).powi(2)).sum::<f64>() / 3.0;
            let fm = mse(
                &b.rendered_feature,
                &s.target_feature.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
            Ok((c, fm))
        })
        .collect::<Result<_>>()?;
    let rgb_mse = errs.iter().map(|e| e.0).sum::<f64>() / count as f64;
    let feature_mse = errs.iter().map(|e| e.1).sum::<f64>() / count as f64;
    Ok(Some(EvalMetrics {
        rays: count,
        rgb_mse,
        psnr: -10.0 * rgb_mse.max(1e-20).log10(),
        feature_mse,
    }))
}

const CSV_HEADER: &str = "iteration,lr,total,rgb,feat,sky,inter,dist,grad_norm,psnr,feature_mse";

fn csv_row(m: &StepMetrics) -> String {
    let l = &m.loss;
    let (psnr, fm) = match &m.eval {
        Some(e) => (format!("{}", e.psnr), format!("{}", e.feature_mse)),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        m.iteration, m.lr, m.total, l.rgb, l.feat, l.sky, l.inter, l.dist, m.grad_norm, psnr, fm
    )
}

/// Optimizes `tile` on the non-dynamic pixels of `manifest`.
pub fn train_tile(
    mut tile: TileField,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out: TrainOutputs<'_>,
) -> Result<(TileField, TrainReport)> {
    cfg.validate()?;
    cfg.proposal.validate(&tile)?;
    if manifest.feature_dim as usize != tile.feature_dim() {
        return Err(Error::Data(format!(
            "feature-dim mismatch: manifest has {}, tile expects {}",
            manifest.feature_dim,
            tile.feature_dim()
        )));
    }
    for vid in manifest.video_ids() {
        tile.embeddings.index(vid)?;
    }
    let (train_pool, held_pool) = PixelPool::split_holdout(manifest, cfg.holdout_every);
    let mut report = TrainReport::default();
    if cfg.iterations == 0 {
        return Ok((tile, report));
    }
    if train_pool.is_empty() {
        return Err(Error::Data("no supervisable pixels: every pixel is dynamic-masked".into()));
    }
    let mut csv = match out.metrics_csv {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((w, p))
        }
        None => None,
    };
    if let Some(dir) = out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = AdamW::new(cfg.adam, tile.params().iter().map(|p| p.data.len()));
    let mut buffers: Vec<TileField> = (0..cfg.resolved_workers()).map(|_| tile.zeros_like()).collect();
    for it in 0..cfg.iterations {
        let lr = cfg.lr_at(it);
        let step_seed = splitmix64(cfg.seed ^ splitmix64(it as u64 + 1));
        let samples = train_pool.sample(manifest, cfg.batch_size, step_seed)?;
        let ray_seed = cfg.stratified.then(|| splitmix64(step_seed));
        let terms = batch_gradients_into(&tile, &samples, &cfg.proposal, &cfg.loss_weights, ray_seed, &mut buffers)?;
        if let Some(term) = terms.non_finite_term() {
            return Err(Error::Numerical(format!("{term} loss is not finite at iteration {it}")));
        }
        let grad_norm = clip_global_norm(buffers[0].params_mut().into_iter().map(|p| p.data), cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is not finite at iteration {it}")));
        }
        opt.step(
            lr,
            tile.params_mut()
                .into_iter()
                .zip(buffers[0].params())
                .map(|(p, g)| (p.data, g.data)),
        );
        let last = it + 1 == cfg.iterations;
        let eval = if last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
            evaluate(&tile, manifest, &held_pool, &cfg.proposal, cfg.eval_rays)?
        } else {
            None
        };
        let m = StepMetrics {
            iteration: it,
            lr,
            total: total_loss(&terms, &cfg.loss_weights),
            loss: terms,
            grad_norm,
            eval,
        };
        match &m.eval {
            Some(e) => log::info!(
                "iter {it}: loss {:.5} psnr {:.2} dB feature mse {:.5}",
                m.total,
                e.psnr,
                e.feature_mse
            ),
            None => log::debug!("iter {it}: loss {:.5} (rgb {:.5})", m.total, terms.rgb),
        }
        if let Some((w, p)) = csv.as_mut() {
            writeln!(w, "{}", csv_row(&m)).map_err(|e| Error::io(*p, e))?;
        }
        if let Some(dir) = out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 || last {
                let name = if last {
                    "tile_final.npck".to_string()
                } else {
                    format!("tile_{:06}.npck", it + 1)
                };
                let path = dir.join(name);
                save_checkpoint(&tile, &path, Dtype::F64)?;
                report.checkpoints.push(path);
            }
        }
        report.final_eval = m.eval.or(report.final_eval);
        report.steps.push(m);
    }
    if let Some((mut w, p)) = csv {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok((tile, report))
}

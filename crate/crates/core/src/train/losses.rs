//! Loss terms. Batch functions average over rays; the `*_ray` helpers return
//! one ray's unnormalized value together with its gradient.

use serde::{Deserialize, Serialize};

use crate::render::RenderedRay;

/// Clamp applied to opacity inside the sky cross-entropy.
pub const SKY_EPS: f64 = 1e-6;
/// Denominator guard in the interlevel loss.
pub const INTERLEVEL_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub feat: f64,
    pub sky: f64,
    pub inter: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feat: 0.5,
            sky: 0.001,
            inter: 1.0,
            dist: 0.002,
        }
    }
}

/// Per-term batch losses (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub feat: f64,
    pub sky: f64,
    pub inter: f64,
    pub dist: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 5] = ["rgb", "feat", "sky", "inter", "dist"];

    pub fn values(&self) -> [f64; 5] {
        [self.rgb, self.feat, self.sky, self.inter, self.dist]
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.rgb += o.rgb;
        self.feat += o.feat;
        self.sky += o.sky;
        self.inter += o.inter;
        self.dist += o.dist;
    }

    /// First term that is not finite.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

pub fn total_loss(terms: &LossBreakdown, w: &LossWeights) -> f64 {
    terms.rgb + w.feat * terms.feat + w.sky * terms.sky + w.inter * terms.inter + w.dist * terms.dist
}

/// Mean squared error over all entries.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Color loss over a batch of `[r, g, b]` rows.
pub fn rgb_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    mse(pred.as_flattened(), target.as_flattened())
}

/// Feature loss over row-major `B × D` batches.
pub fn feat_loss(pred: &[f64], target: &[f64]) -> f64 {
    mse(pred, target)
}

/// Binary cross-entropy of one ray's clamped opacity against `1 − sky`,
/// and its derivative with respect to the unclamped opacity.
pub fn sky_ray(opacity: f64, is_sky: bool) -> (f64, f64) {
    let o = opacity.clamp(SKY_EPS, 1.0 - SKY_EPS);
    let inside = opacity > SKY_EPS && opacity < 1.0 - SKY_EPS;
    if is_sky {
        (-(1.0 - o).ln(), if inside { 1.0 / (1.0 - o) } else { 0.0 })
    } else {
        (-o.ln(), if inside { -1.0 / o } else { 0.0 })
    }
}

pub fn sky_loss(opacity: &[f64], sky: &[bool]) -> f64 {
    assert_eq!(opacity.len(), sky.len());
    if opacity.is_empty() {
        return 0.0;
    }
    opacity.iter().zip(sky).map(|(&o, &s)| sky_ray(o, s).0).sum::<f64>() / opacity.len() as f64
}

/// One proposal stage against the final stage of the same ray. Interval `i`
/// is `[depths[i], depths[i+1])`, the last one ending at the ray's `t_end`.
/// Returns the loss and its gradient with respect to the proposal weights;
/// the final weights are treated as constants.
pub fn interlevel_ray(
    prop_depths: &[f64],
    prop_weights: &[f64],
    prop_end: f64,
    final_depths: &[f64],
    final_weights: &[f64],
    final_end: f64,
) -> (f64, Vec<f64>) {
    let n = final_depths.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    let end_of = |k: usize| if k + 1 < n { final_depths[k + 1] } else { final_end };
    for (k, w) in final_weights.iter().enumerate() {
        // empty intervals overlap nothing
        let w = if end_of(k) > final_depths[k] { *w } else { 0.0 };
        cum.push(cum.last().unwrap() + w);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; prop_depths.len()];
    for i in 0..prop_depths.len() {
        let a = prop_depths[i];
        let b = if i + 1 < prop_depths.len() { prop_depths[i + 1] } else { prop_end };
        if !(b > a) {
            continue;
        }
        // final intervals [c_k, d_k) overlap [a, b) iff d_k > a and c_k < b
        let mut lo = final_depths.get(1..).unwrap_or(&[]).partition_point(|&d| d <= a);
        if lo < n && end_of(lo) <= a {
            lo = n;
        }
        let hi = final_depths.partition_point(|&c| c < b);
        let bound = if hi > lo { cum[hi] - cum[lo] } else { 0.0 };
        let w = prop_weights[i];
        let excess = bound - w;
        if excess > 0.0 {
            let den = w + INTERLEVEL_EPS;
            loss += excess * excess / den;
            grad[i] = -(2.0 * excess * den + excess * excess) / (den * den);
        }
    }
    (loss, grad)
}

/// Interlevel loss summed over proposal stages, averaged over rays.
pub fn interlevel_loss(rays: &[RenderedRay]) -> f64 {
    if rays.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in rays {
        let f = &r.final_batch;
        for s in &r.stages {
            total += interlevel_ray(&s.depths, &s.comp.weights, s.t_end, &f.depths, &f.comp.weights, f.t_end).0;
        }
    }
    total / rays.len() as f64
}

/// Distortion of one ray over its clipped range `[t_start, t_end]`, with
/// interval midpoints and widths normalized to `[0, 1]`:
/// `Σᵢⱼ wᵢwⱼ|mᵢ − mⱼ| + ⅓ Σᵢ wᵢ² Δᵢ`. Returns the loss and its gradient
/// with respect to the weights.
pub fn distortion_ray(depths: &[f64], weights: &[f64], t_start: f64, t_end: f64) -> (f64, Vec<f64>) {
    let n = depths.len();
    let span = t_end - t_start;
    if n == 0 || !(span > 0.0) {
        return (0.0, vec![0.0; n]);
    }
    let s = |t: f64| (t - t_start) / span;
    let edge = |i: usize| if i < n { s(depths[i]) } else { 1.0 };
    let mid: Vec<f64> = (0..n).map(|i| 0.5 * (edge(i) + edge(i + 1))).collect();
    let width: Vec<f64> = (0..n).map(|i| edge(i + 1) - edge(i)).collect();
    let total_w: f64 = weights.iter().sum();
    let total_wm: f64 = weights.iter().zip(&mid).map(|(w, m)| w * m).sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    // prefix sums before i: W = Σ w, S = Σ w m
    let (mut pw, mut ps) = (0.0, 0.0);
    for i in 0..n {
        let (w, m) = (weights[i], mid[i]);
        let before = m * pw - ps;
        let after = (total_wm - ps - w * m) - m * (total_w - pw - w);
        loss += 2.0 * w * before + w * w * width[i] / 3.0;
        grad[i] = 2.0 * (before + after) + 2.0 * w * width[i] / 3.0;
        pw += w;
        ps += w * m;
    }
    (loss, grad)
}

pub fn distortion_loss(rays: &[RenderedRay]) -> f64 {
    if rays.is_empty() {
        return 0.0;
    }
    rays.iter()
        .map(|r| {
            let f = &r.final_batch;
            distortion_ray(&f.depths, &f.comp.weights, f.t_start, f.t_end).0
        })
        .sum::<f64>()
        / rays.len() as f64
}

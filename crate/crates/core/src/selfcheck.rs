//! Oracle and gradient suites runnable from an installed binary.
//!
//! Every check compares a production code path against an independent
//! reference (brute force, closed form or central finite differences) and
//! reports a pass/fail line instead of panicking.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Ray, RaySample};
use crate::extract::{read_prior, voxel_downsample, write_prior, SurfacePoint};
use crate::field::{read_checkpoint, write_checkpoint, Dtype, FieldConfig, TileField};
use crate::geometry::{Aabb, Vec3};
use crate::integrate::{fuse, fuse_backward, fuse_traced, BevFeatureGrid, FusionHead, GridSpec};
use crate::render::{composite, render_ray, rerender, sample_uniform, Compositing, ProposalConfig, RenderedRay};
use crate::train::{
    batch_gradients, batch_terms, distortion_ray, interlevel_loss, interlevel_ray, total_loss, LossWeights,
    INTERLEVEL_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Central-difference settings. A component passes when its relative error
/// is below `rel`, or when both values are near zero and differ by less
/// than `abs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdTolerance {
    pub h: f64,
    pub rel: f64,
    pub abs: f64,
    /// Magnitude below which a gradient counts as near zero.
    pub tiny: f64,
}

impl Default for FdTolerance {
    fn default() -> Self {
        Self {
            h: 1e-4,
            rel: 1e-3,
            abs: 1e-8,
            tiny: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Largest relative error among components that are not near zero.
    pub max_rel: f64,
    /// `(index, analytic, finite difference)` of every failing component.
    pub failures: Vec<(usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn absorb(&mut self, other: FdReport, offset: usize) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.failures
            .extend(other.failures.into_iter().map(|(i, a, f)| (i + offset, a, f)));
    }
}

/// Compares `analytic[i]` with `(f(i, h) - f(i, -h)) / 2h`, where `f(i, d)`
/// evaluates the loss with component `i` shifted by `d`.
pub fn compare_gradients(analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64, tol: FdTolerance) -> FdReport {
    let mut rep = FdReport::default();
    for (i, &a) in analytic.iter().enumerate() {
        let fd = (f(i, tol.h) - f(i, -tol.h)) / (2.0 * tol.h);
        rep.checked += 1;
        let ok = if fd.abs() < tol.tiny && a.abs() < tol.tiny {
            (fd - a).abs() < tol.abs
        } else {
            let rel = (fd - a).abs() / fd.abs().max(a.abs());
            rep.max_rel = rep.max_rel.max(rel);
            rel < tol.rel
        };
        if !ok {
            rep.failures.push((i, a, fd));
        }
    }
    rep
}

fn summarize(rep: &FdReport) -> String {
    let mut s = format!("{} components, max rel err {:.2e}", rep.checked, rep.max_rel);
    if let Some((i, a, f)) = rep.failures.first() {
        s.push_str(&format!(
            ", {} failing (first: #{i} analytic {a:.6e} vs fd {f:.6e})",
            rep.failures.len()
        ));
    }
    s
}

/// Two-sub-field tile on the tiny configuration with randomized tables and
/// embeddings. Biases are jittered so no ReLU sits exactly at its kink.
pub fn tiny_tile(feature_dim: usize, seed: u64) -> TileField {
    let b = Aabb::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0]);
    let centroids = [Vec3::new(-0.5, 0.0, 0.5), Vec3::new(0.8, 0.3, 1.0)];
    let mut t = TileField::new(FieldConfig::tiny(b, feature_dim), &centroids, &[0, 1], seed)
        .expect("tiny configuration is valid");
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in t.params_mut() {
        if p.name.contains("grid") || p.name == "video_embeddings" {
            p.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        } else if p.name.ends_with("bias") {
            p.data.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        }
    }
    t
}

/// Random rays starting inside the tiny tile, the last one labelled sky.
pub fn tiny_samples(n: usize, dim: usize, seed: u64) -> Vec<RaySample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-0.5..0.5));
            RaySample {
                frame: 0,
                ray: Ray {
                    origin: Vec3::new(r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(0.0..2.0)),
                    direction: d.normalize(),
                    video_id: (i % 2) as u32,
                    pixel: (0, i as u32),
                    near: 0.05,
                    far: 30.0,
                },
                target_rgb: [r.random(), r.random(), r.random()],
                target_feature: (0..dim).map(|_| r.random_range(-0.5..0.5)).collect(),
                is_sky: i + 1 == n,
            }
        })
        .collect()
}

/// Analytic gradients of the full weighted loss on 4 rays of the tiny
/// configuration (`D = 4`, 8 samples per stage) against central finite
/// differences for every parameter. The interlevel bound comes from the
/// final weights under stop-gradient, so the oracle holds the final stage
/// fixed inside that term.
pub fn check_field_gradients(weights: LossWeights) -> Check {
    let t = tiny_tile(4, 7);
    let samples = tiny_samples(4, 4, 71);
    let cfg = ProposalConfig {
        stage_samples: vec![8, 8],
        final_samples: 8,
    };
    let run = || -> crate::Result<FdReport> {
        let rendered: Vec<RenderedRay> = samples
            .iter()
            .map(|s| render_ray(&t, &s.ray, &cfg, None))
            .collect::<crate::Result<_>>()?;
        let (_, grads) = batch_gradients(&t, &samples, &cfg, &weights, None)?;
        let loss = |p: &TileField| {
            let rr: Vec<RenderedRay> = samples
                .iter()
                .zip(&rendered)
                .map(|(s, r)| rerender(p, &s.ray, r).expect("tiny rays render"))
                .collect();
            let mut terms = batch_terms(&samples, &rr, &weights);
            let frozen: Vec<RenderedRay> = rr
                .iter()
                .zip(&rendered)
                .map(|(new, base)| RenderedRay {
                    stages: new.stages.clone(),
                    final_batch: base.final_batch.clone(),
                })
                .collect();
            terms.inter = interlevel_loss(&frozen);
            total_loss(&terms, &weights)
        };
        let mut rep = FdReport::default();
        let mut offset = 0;
        for (pi, g) in grads.params().iter().enumerate() {
            let part = compare_gradients(
                g.data,
                |j, d| {
                    let mut p = t.clone();
                    p.params_mut()[pi].data[j] += d;
                    loss(&p)
                },
                FdTolerance::default(),
            );
            offset += g.data.len();
            rep.absorb(part, offset - g.data.len());
        }
        Ok(rep)
    };
    match run() {
        Ok(rep) => Check::new("field gradients", rep.passed(), summarize(&rep)),
        Err(e) => Check::new("field gradients", false, e.to_string()),
    }
}

/// `Σ Tᵢαᵢ + Π(1 − αᵢ) = 1` on random rays with random densities.
pub fn check_conservation(rays: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rays {
        let n = rng.random_range(1..128);
        let mut depths: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        depths.sort_by(f64::total_cmp);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0f64).powi(3)).collect();
        let c = Compositing::new(&depths, 10.0, &sigma);
        let weights: f64 = (0..n).map(|i| c.transmittance[i] * c.alpha[i]).sum();
        let residual: f64 = c.alpha.iter().map(|a| 1.0 - a).product();
        worst = worst.max((weights + residual - 1.0).abs());
    }
    Check::new(
        "compositing conservation",
        worst < 1e-6,
        format!("{rays} rays, max |sum - 1| = {worst:.2e}"),
    )
}

/// Piecewise-constant density with sample boundaries on the segment
/// boundaries gives opacity `1 − exp(−Σ σₖLₖ)`.
pub fn check_transmittance(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let segments = rng.random_range(1..5);
        let mut t = rng.random_range(0.0..2.0);
        let (mut depths, mut sigma, mut optical) = (Vec::new(), Vec::new(), 0.0);
        for _ in 0..segments {
            let (s, len, n) = (rng.random_range(0.0..4.0), rng.random_range(0.05..5.0), rng.random_range(1..32));
            for i in 0..n {
                depths.push(t + len * i as f64 / n as f64);
                sigma.push(s);
            }
            optical += s * len;
            t += len;
        }
        let c = Compositing::new(&depths, t, &sigma);
        worst = worst.max((c.opacity() - (1.0 - (-optical).exp())).abs());
    }
    Check::new(
        "analytic transmittance",
        worst < 1e-6,
        format!("{cases} segment chains, max error {worst:.2e}"),
    )
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, dyadic: bool) -> Vec<SurfacePoint> {
    (0..n)
        .map(|_| SurfacePoint {
            position: Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
            feature: (0..dim)
                .map(|_| {
                    if dyadic {
                        rng.random_range(-1024i32..=1024) as f32 / 1024.0
                    } else {
                        rng.random_range(-2.0f32..2.0)
                    }
                })
                .collect(),
            video_id: 0,
            pixel: (0, 0),
        })
        .collect()
}

/// Downsampling against a hash-map group-by mean, and downsampling the
/// union against merging the parts. Merge features are dyadic rationals
/// so every partial sum is exact.
pub fn check_voxel_mean(points: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (size, origin, dim) = (0.5, Vec3::new(0.1, -0.2, 0.05), 5);
    let pts = random_points(&mut rng, points, dim, false);
    let run = || -> crate::Result<(usize, usize, bool)> {
        let grid = voxel_downsample(&pts, size, origin)?;
        let (s, o) = (grid.voxel_size as f64, grid.origin.map(|v| v as f64));
        let mut groups: HashMap<[i32; 3], (Vec<f64>, f64)> = HashMap::new();
        for p in &pts {
            let key = [0, 1, 2].map(|a| ((p.position[a] - o[a]) / s).floor() as i32);
            let e = groups.entry(key).or_insert_with(|| (vec![0.0; dim], 0.0));
            for (acc, &f) in e.0.iter_mut().zip(&p.feature) {
                *acc += f as f64;
            }
            e.1 += 1.0;
        }
        let mut mismatches = usize::from(groups.len() != grid.len());
        for (key, (sum, n)) in &groups {
            let expect: Vec<f32> = sum.iter().map(|v| (v / n) as f32).collect();
            match grid.get(key) {
                Some(c) if c.weight() == *n && c.feature() == expect => {}
                _ => mismatches += 1,
            }
        }
        let dy = random_points(&mut rng.clone(), points, dim, true);
        let (a, b) = dy.split_at(points / 3);
        let whole = voxel_downsample(&dy, size, origin)?;
        let mut merged = voxel_downsample(a, size, origin)?;
        merged.merge(&voxel_downsample(b, size, origin)?)?;
        Ok((groups.len(), mismatches, merged == whole))
    };
    match run() {
        Ok((cells, mismatches, merge_ok)) => Check::new(
            "voxel mean and merge",
            mismatches == 0 && merge_ok,
            format!("{points} points in {cells} cells, {mismatches} mismatched, merge identity {merge_ok}"),
        ),
        Err(e) => Check::new("voxel mean and merge", false, e.to_string()),
    }
}

/// One sub-field against a direct, unrouted evaluation of that sub-field,
/// and routing against an exhaustive nearest-centroid scan.
pub fn check_subfields(seed: u64) -> Check {
    let run = || -> crate::Result<(bool, usize, usize)> {
        let b = Aabb::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let single = TileField::new(FieldConfig::tiny(b, 4), &[Vec3::new(0.3, 0.1, 0.7)], &[0, 5], seed)?;
        let mut identical = true;
        for _ in 0..32 {
            let ray = Ray {
                origin: Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
                direction: Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
                video_id: 5,
                pixel: (0, 0),
                near: 0.1,
                far: 20.0,
            };
            let depths = sample_uniform(0.5, 6.0, 24, None);
            let got = composite(&single, &ray, &depths)?;
            let points: Vec<Vec3> = depths.iter().map(|&d| ray.origin + ray.direction * d).collect();
            let emb = single.embeddings.row(single.embeddings.index(5)?);
            let (out, _) = single.subfields[0].forward(&points, &single.direction_encoding(&ray.direction), emb);
            let comp = Compositing::new(&depths, ray.far, &out.sigma);
            let (sky, sky_f) = single.query_sky(&ray.direction, 5)?;
            let o: f64 = comp.weights.iter().sum();
            let mut rgb = [0.0; 3];
            let mut f = vec![0.0; 4];
            for i in 0..depths.len() {
                for c in 0..3 {
                    rgb[c] += comp.weights[i] * out.color[i * 3 + c];
                }
                for k in 0..4 {
                    f[k] += comp.weights[i] * out.feature[i * 4 + k];
                }
            }
            for c in 0..3 {
                rgb[c] += (1.0 - o) * sky[c];
            }
            for k in 0..4 {
                f[k] += (1.0 - o) * sky_f[k];
            }
            identical &= got.sigma == out.sigma && got.rgb == rgb && got.rendered_feature == f && got.opacity == o;
        }
        let centroids: Vec<Vec3> = (0..9)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0)))
            .collect();
        let many = TileField::new(FieldConfig::tiny(b, 4), &centroids, &[0, 5], seed)?;
        let cfg = ProposalConfig {
            stage_samples: vec![8, 8],
            final_samples: 16,
        };
        let (mut checked, mut wrong) = (0, 0);
        for _ in 0..200 {
            let ray = Ray {
                origin: Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
                direction: Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
                video_id: 0,
                pixel: (0, 0),
                near: 0.0,
                far: 20.0,
            };
            let r = render_ray(&many, &ray, &cfg, None)?.final_batch;
            for (p, &j) in r.points.iter().zip(&r.subfield) {
                let mut best = 0;
                for (k, c) in centroids.iter().enumerate() {
                    if (p - c).norm_squared() < (p - centroids[best]).norm_squared() {
                        best = k;
                    }
                }
                checked += 1;
                wrong += usize::from(best != j);
            }
        }
        Ok((identical, checked, wrong))
    };
    match run() {
        Ok((identical, checked, wrong)) => Check::new(
            "sub-field equivalence",
            identical && wrong == 0,
            format!("single-field renders bit-identical {identical}; {wrong} of {checked} samples misrouted"),
        ),
        Err(e) => Check::new("sub-field equivalence", false, e.to_string()),
    }
}

fn brute_interlevel(pd: &[f64], pw: &[f64], pe: f64, fd: &[f64], fw: &[f64], fe: f64) -> f64 {
    let iv = |d: &[f64], e: f64, i: usize| (d[i], if i + 1 < d.len() { d[i + 1] } else { e });
    let mut loss = 0.0;
    for i in 0..pd.len() {
        let (a, b) = iv(pd, pe, i);
        let mut bound = 0.0;
        for k in 0..fd.len() {
            let (c, d) = iv(fd, fe, k);
            if b.min(d) > a.max(c) {
                bound += fw[k];
            }
        }
        let e = (bound - pw[i]).max(0.0);
        loss += e * e / (pw[i] + INTERLEVEL_EPS);
    }
    loss
}

fn brute_distortion(d: &[f64], w: &[f64], t0: f64, t1: f64) -> f64 {
    let n = d.len();
    let s: Vec<f64> = (0..=n).map(|i| if i < n { (d[i] - t0) / (t1 - t0) } else { 1.0 }).collect();
    let mut l = 0.0;
    for i in 0..n {
        for j in 0..n {
            l += w[i] * w[j] * (0.5 * (s[i] + s[i + 1]) - 0.5 * (s[j] + s[j + 1])).abs();
        }
        l += w[i] * w[i] * (s[i + 1] - s[i]) / 3.0;
    }
    l
}

fn random_intervals(r: &mut ChaCha8Rng, n: usize, t0: f64, t1: f64) -> (Vec<f64>, Vec<f64>) {
    let mut d: Vec<f64> = (0..n).map(|_| r.random_range(t0..t1)).collect();
    d.sort_by(f64::total_cmp);
    d[0] = t0;
    let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() / n as f64).collect();
    (d, w)
}

/// Interlevel and distortion losses against O(N²) references, and the
/// default loss weights.
pub fn check_loss_oracles(cases: usize, seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut inter, mut dist): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let (np, nf) = (r.random_range(1..64), r.random_range(1..64));
        let (pd, pw) = random_intervals(&mut r, np, 1.0, 9.0);
        let (fd, fw) = random_intervals(&mut r, nf, 1.0, 9.0);
        let l = interlevel_ray(&pd, &pw, 9.0, &fd, &fw, 9.0).0;
        let b = brute_interlevel(&pd, &pw, 9.0, &fd, &fw, 9.0);
        inter = inter.max((l - b).abs() / b.abs().max(1.0));
        let l = distortion_ray(&fd, &fw, 1.0, 9.0).0;
        dist = dist.max((l - brute_distortion(&fd, &fw, 1.0, 9.0)).abs());
    }
    let w = LossWeights::default();
    let weights_ok = (w.feat, w.sky, w.inter, w.dist) == (0.5, 0.001, 1.0, 0.002);
    Check::new(
        "loss oracles",
        inter < 1e-6 && dist < 1e-6 && weights_ok,
        format!(
            "{cases} cases, interlevel err {inter:.2e}, distortion err {dist:.2e}, weights (feat {}, sky {}, inter {}, dist {})",
            w.feat, w.sky, w.inter, w.dist
        ),
    )
}

fn random_grid(spec: GridSpec, channels: usize, rng: &mut ChaCha8Rng) -> BevFeatureGrid {
    let mut g = BevFeatureGrid::zeros(spec, channels);
    g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    g
}

/// Identity head with a zero prior returns the online grid, and head and
/// input gradients match finite differences.
pub fn check_fusion(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = || -> crate::Result<(f64, FdReport)> {
        let spec = GridSpec {
            x_range: (-4.0, 4.0),
            y_range: (-3.0, 3.0),
            z_range: (-1.0, 2.0),
            resolution: 0.5,
        };
        let online = random_grid(spec, 6, &mut rng);
        let out = fuse(&online, &BevFeatureGrid::zeros(spec, 4), &FusionHead::identity(6, 4))?;
        let identity_err = out.data.iter().zip(&online.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

        let small = GridSpec {
            x_range: (0.0, 2.5),
            y_range: (0.0, 2.0),
            z_range: (0.0, 1.0),
            resolution: 0.5,
        };
        let on = random_grid(small, 2, &mut rng);
        let pr = random_grid(small, 3, &mut rng);
        let mut head = FusionHead::new(2, 3, 4, seed);
        for b in head.conv1.bias.iter_mut().chain(head.conv2.bias.iter_mut()) {
            *b = rng.random_range(-0.3..0.3);
        }
        let readout: Vec<f64> = (0..on.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |h: &FusionHead, a: &BevFeatureGrid, b: &BevFeatureGrid| -> f64 {
            fuse(a, b, h).expect("shapes match").data.iter().zip(&readout).map(|(x, y)| x * y).sum()
        };
        let (_, trace) = fuse_traced(&on, &pr, &head)?;
        let mut g = fuse_backward(&head, &trace, &readout);
        let tol = FdTolerance::default();
        let mut rep = FdReport::default();
        let mut offset = 0;
        let analytic: Vec<Vec<f64>> = g.head.params_mut().iter().map(|p| p.to_vec()).collect();
        for (k, a) in analytic.iter().enumerate() {
            let part = compare_gradients(
                a,
                |i, d| {
                    let mut p = head.clone();
                    p.params_mut()[k][i] += d;
                    loss(&p, &on, &pr)
                },
                tol,
            );
            rep.absorb(part, offset);
            offset += a.len();
        }
        let part = compare_gradients(
            &g.online,
            |i, d| {
                let mut p = on.clone();
                p.data[i] += d;
                loss(&head, &p, &pr)
            },
            tol,
        );
        rep.absorb(part, offset);
        offset += g.online.len();
        let part = compare_gradients(
            &g.prior,
            |i, d| {
                let mut p = pr.clone();
                p.data[i] += d;
                loss(&head, &on, &p)
            },
            tol,
        );
        rep.absorb(part, offset);
        Ok((identity_err, rep))
    };
    match run() {
        Ok((err, rep)) => Check::new(
            "fusion identity and gradients",
            err < 1e-6 && rep.passed(),
            format!("identity max error {err:.2e}; {}", summarize(&rep)),
        ),
        Err(e) => Check::new("fusion identity and gradients", false, e.to_string()),
    }
}

/// Checkpoints and prior files read back to equal values and re-encode to
/// identical bytes.
pub fn check_round_trips(seed: u64) -> Check {
    let run = || -> crate::Result<(bool, bool, bool)> {
        let tile = tiny_tile(4, seed);
        let bytes = write_checkpoint(&tile, Dtype::F64);
        let back = read_checkpoint(&bytes, "checkpoint")?;
        let f64_ok = back == tile && write_checkpoint(&back, Dtype::F64) == bytes;
        let narrow = write_checkpoint(&tile, Dtype::F32);
        let f32_ok = write_checkpoint(&read_checkpoint(&narrow, "checkpoint")?, Dtype::F32) == narrow;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = voxel_downsample(&random_points(&mut rng, 2000, 6, false), 0.25, Vec3::zeros())?;
        let pbytes = write_prior(&grid)?;
        let pback = read_prior(&pbytes, "prior")?;
        let prior_ok = pback == grid && write_prior(&pback)? == pbytes;
        Ok((f64_ok, f32_ok, prior_ok))
    };
    match run() {
        Ok((a, b, c)) => Check::new(
            "round trips",
            a && b && c,
            format!("checkpoint f64 {a}, checkpoint f32 {b}, prior {c}"),
        ),
        Err(e) => Check::new("round trips", false, e.to_string()),
    }
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check_field_gradients(LossWeights::default()),
        check_field_gradients(LossWeights {
            // enlarge the small terms so their gradients are visible
            sky: 0.1,
            dist: 0.5,
            ..LossWeights::default()
        }),
        check_conservation(10_000, seed),
        check_transmittance(1000, seed),
        check_voxel_mean(10_000, seed),
        check_subfields(seed),
        check_loss_oracles(500, seed),
        check_fusion(seed),
        check_round_trips(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_flags_a_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let x = [0.7, -0.2];
        let eval = |i: usize, d: f64| {
            let mut y = x;
            y[i] += d;
            f(&y)
        };
        assert!(compare_gradients(&[1.4, 3.0], eval, FdTolerance::default()).passed());
        let bad = compare_gradients(&[1.4, 3.1], eval, FdTolerance::default());
        assert_eq!(bad.failures.len(), 1);
        assert_eq!(bad.failures[0].0, 1);
    }

    #[test]
    fn every_suite_passes() {
        for c in run_all(0) {
            assert!(c.passed, "{c}");
        }
    }
}

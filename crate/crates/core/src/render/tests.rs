use super::*;
use crate::dataset::{camera_ray, CameraIntrinsics, Pose};
use crate::field::FieldConfig;
use crate::geometry::Aabb;
use rand::{Rng, SeedableRng};

fn bounds() -> Aabb {
    Aabb::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0])
}

fn tile_with(centroids: &[Vec3], seed: u64) -> TileField {
    let mut t = TileField::new(FieldConfig::tiny(bounds(), 4), centroids, &[0, 5], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in t.params_mut() {
        if p.name.contains("grid") || p.name == "video_embeddings" {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        } else if p.name.ends_with("bias") {
            // keep ReLU pre-activations off exact zeros
            p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
    t
}

fn tile() -> TileField {
    tile_with(&[Vec3::new(-1.0, 0.0, 0.5), Vec3::new(1.0, 0.2, 1.0)], 1)
}

/// Forces every sub-field to output density `softplus(bias)`.
fn set_density(tile: &mut TileField, bias: f64) {
    for sf in &mut tile.subfields {
        let last = sf.trunk.layers.last_mut().unwrap();
        last.weight[..last.in_dim].fill(0.0);
        last.bias[0] = bias;
    }
}

fn test_ray(vid: u32) -> Ray {
    Ray {
        origin: Vec3::new(-1.5, -1.8, 0.2),
        direction: Vec3::new(1.0, 1.2, 0.4).normalize(),
        video_id: vid,
        pixel: (0, 0),
        near: 0.1,
        far: 50.0,
    }
}

fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Ray {
        origin: Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..2.0)),
        direction: d.normalize(),
        video_id: if rng.random::<bool>() { 0 } else { 5 },
        pixel: (0, 0),
        near: 0.0,
        far: 20.0,
    }
}

#[test]
fn conservation_on_random_rays() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let n = rng.random_range(1..64);
        let mut depths: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        depths.sort_by(f64::total_cmp);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0f64).powi(3)).collect();
        let c = Compositing::new(&depths, 10.0, &sigma);
        let total = c.opacity() + c.transmittance[n];
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!(c.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn constant_density_matches_exponential_attenuation() {
    for (sigma, len, n) in [(1.0, 2.0, 8), (0.3, 7.5, 3), (4.0, 0.25, 64)] {
        let depths: Vec<f64> = (0..n).map(|i| 1.0 + len * i as f64 / n as f64).collect();
        let c = Compositing::new(&depths, 1.0 + len, &vec![sigma; n]);
        let expect = 1.0 - (-sigma * len).exp();
        assert!((c.opacity() - expect).abs() < 1e-6, "{} vs {expect}", c.opacity());
    }
    // two segments of different density, boundaries aligned
    let c = Compositing::new(&[0.0, 0.5, 1.0, 2.0], 3.0, &[2.0, 2.0, 0.5, 0.5]);
    let expect = 1.0 - (-(2.0 * 1.0 + 0.5 * 2.0f64)).exp();
    assert!((c.opacity() - expect).abs() < 1e-12);
}

#[test]
fn empty_space_shows_the_sky() {
    let mut t = tile();
    set_density(&mut t, -1000.0);
    let ray = test_ray(5);
    let depths = sample_uniform(0.5, 3.0, 16, None);
    let b = composite(&t, &ray, &depths).unwrap();
    let (c, f) = t.query_sky(&ray.direction, 5).unwrap();
    assert_eq!(b.opacity, 0.0);
    assert_eq!(b.rgb, c);
    assert_eq!(b.rendered_feature, f);
}

#[test]
fn opaque_first_sample_hides_the_rest() {
    let mut t = tile();
    set_density(&mut t, 1e9);
    let ray = test_ray(0);
    let b = composite(&t, &ray, &[0.5, 1.0, 1.5, 2.0]).unwrap();
    assert_eq!(b.opacity, 1.0);
    assert_eq!(b.rgb, b.color[0]);
    assert_eq!(b.rendered_feature, b.feature_at(0));
    assert_eq!(&b.comp.weights[1..], &[0.0; 3]);
}

#[test]
fn unsorted_or_out_of_range_depths_are_rejected() {
    let t = tile();
    let ray = test_ray(0);
    assert!(composite(&t, &ray, &[1.0, 0.5]).is_err());
    assert!(composite(&t, &ray, &[0.05, 0.5]).is_err());
    assert!(composite(&t, &ray, &[1.0, 60.0]).is_err());
}

#[test]
fn single_subfield_matches_direct_evaluation() {
    let t = tile_with(&[Vec3::new(0.3, 0.1, 0.7)], 3);
    let ray = test_ray(5);
    let depths = sample_uniform(0.5, 4.0, 24, None);
    let b = composite(&t, &ray, &depths).unwrap();
    // reference: no routing, one batched query of the only sub-field
    let points: Vec<Vec3> = depths.iter().map(|&d| ray.origin + ray.direction * d).collect();
    let emb = t.embeddings.row(t.embeddings.index(5).unwrap());
    let (out, _) = t.subfields[0].forward(&points, &t.direction_encoding(&ray.direction), emb);
    assert_eq!(b.sigma, out.sigma);
    let comp = Compositing::new(&depths, ray.far, &out.sigma);
    let (sky, sky_f) = t.query_sky(&ray.direction, 5).unwrap();
    let o: f64 = comp.weights.iter().sum();
    let mut rgb = [0.0; 3];
    for i in 0..depths.len() {
        for c in 0..3 {
            rgb[c] += comp.weights[i] * out.color[i * 3 + c];
        }
    }
    for c in 0..3 {
        rgb[c] += (1.0 - o) * sky[c];
    }
    let mut f = vec![0.0; 4];
    for i in 0..depths.len() {
        for k in 0..4 {
            f[k] += comp.weights[i] * out.feature[i * 4 + k];
        }
    }
    for k in 0..4 {
        f[k] += (1.0 - o) * sky_f[k];
    }
    assert_eq!(b.rgb, rgb);
    assert_eq!(b.rendered_feature, f);
    assert_eq!(b.opacity, o);
}

#[test]
fn routing_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centroids: Vec<Vec3> = (0..7)
        .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0)))
        .collect();
    let t = tile_with(&centroids, 4);
    for _ in 0..100 {
        let x = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0));
        let mut best = 0;
        for j in 1..7 {
            if (x - centroids[j]).norm_squared() < (x - centroids[best]).norm_squared() {
                best = j;
            }
        }
        assert_eq!(t.assign_subfield(&x), best);
    }
    assert_eq!(t.assign_subfield(&centroids[3]), 3);
    let ray = random_ray(&mut rng);
    let r = render_ray(&t, &ray, &ProposalConfig { stage_samples: vec![8, 8], final_samples: 16 }, None).unwrap();
    for (p, &j) in r.final_batch.points.iter().zip(&r.final_batch.subfield) {
        assert_eq!(j, t.assign_subfield(p));
    }
}

#[test]
fn subfield_changes_stay_local() {
    let t = tile();
    let mut t2 = t.clone();
    t2.subfields[1].feature_head.layers[0].bias[0] += 0.5;
    t2.subfields[1].grid.tables[0][3] += 0.5;
    let cfg = ProposalConfig { stage_samples: vec![6, 6], final_samples: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut touched, mut untouched) = (0, 0);
    for _ in 0..200 {
        let ray = random_ray(&mut rng);
        let a = render_ray(&t, &ray, &cfg, None).unwrap().final_batch;
        let b = render_ray(&t2, &ray, &cfg, None).unwrap().final_batch;
        if a.subfield.contains(&1) {
            touched += 1;
        } else {
            untouched += 1;
            assert_eq!(a, b);
        }
    }
    assert!(touched > 0 && untouched > 0);
}

#[test]
fn render_ray_is_deterministic() {
    let t = tile();
    let cfg = ProposalConfig { stage_samples: vec![4, 4], final_samples: 4 };
    let ray = test_ray(0);
    let a = render_ray(&t, &ray, &cfg, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    let b = render_ray(&t, &ray, &cfg, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    assert_eq!(a, b);
    assert_eq!(render_ray(&t, &ray, &cfg, None).unwrap(), render_ray(&t, &ray, &cfg, None).unwrap());
}

#[test]
fn empty_proposals_give_uniform_final_samples() {
    let mut t = tile();
    for p in &mut t.proposals {
        let last = p.trunk.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias[0] = -1000.0;
    }
    let cfg = ProposalConfig { stage_samples: vec![8, 8], final_samples: 10 };
    let ray = test_ray(0);
    let r = render_ray(&t, &ray, &cfg, None).unwrap();
    let s2 = &r.stages[1];
    let expect = sample_uniform(s2.depths[0], s2.t_end, 10, None);
    for (a, b) in r.final_batch.depths.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn samples_stay_inside_the_clipped_range() {
    let t = tile();
    let cfg = ProposalConfig { stage_samples: vec![16, 8], final_samples: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = bounds();
    for _ in 0..200 {
        let ray = random_ray(&mut rng);
        let r = render_ray(&t, &ray, &cfg, Some(&mut rng)).unwrap();
        for s in &r.stages {
            assert!(s.depths.iter().all(|&d| d >= ray.near && d <= ray.far));
        }
        for p in &r.final_batch.points {
            for a in 0..3 {
                assert!(p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9);
            }
        }
    }
}

#[test]
fn ray_missing_the_tile_is_pure_sky() {
    let t = tile();
    let ray = Ray {
        origin: Vec3::new(10.0, 10.0, 10.0),
        direction: Vec3::z(),
        video_id: 0,
        pixel: (0, 0),
        near: 0.1,
        far: 100.0,
    };
    let r = render_ray(&t, &ray, &ProposalConfig { stage_samples: vec![4, 4], final_samples: 4 }, None).unwrap();
    assert!(r.final_batch.is_empty());
    assert_eq!(r.final_batch.rgb, t.query_sky(&ray.direction, 0).unwrap().0);
    assert_eq!(r.final_batch.opacity, 0.0);
}

/// Scalar readout touching every output of a traced ray.
struct Readout {
    rgb: [f64; 3],
    feature: Vec<f64>,
    opacity: f64,
    weights: Vec<f64>,
    stage: Vec<Vec<f64>>,
}

impl Readout {
    fn eval(&self, r: &RenderedRay) -> f64 {
        let b = &r.final_batch;
        let mut s = self.opacity * b.opacity;
        s += (0..3).map(|c| self.rgb[c] * b.rgb[c]).sum::<f64>();
        s += self.feature.iter().zip(&b.rendered_feature).map(|(a, b)| a * b).sum::<f64>();
        s += self.weights.iter().zip(&b.comp.weights).map(|(a, b)| a * b).sum::<f64>();
        for (st, c) in r.stages.iter().zip(&self.stage) {
            s += c.iter().zip(&st.comp.weights).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }
}

#[test]
fn ray_gradients_match_finite_differences() {
    let t = tile();
    let cfg = ProposalConfig { stage_samples: vec![5, 4], final_samples: 6 };
    let ray = test_ray(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let ro = Readout {
        rgb: [0.3, -0.7, 0.5],
        feature: rnd(4),
        opacity: 0.4,
        weights: rnd(6),
        stage: vec![rnd(5), rnd(4)],
    };
    let (r, tape) = trace_ray(&t, &ray, &cfg, None).unwrap();
    assert!(r.final_batch.subfield.contains(&0) && r.final_batch.subfield.contains(&1));
    let adj = RayAdjoint {
        d_rgb: ro.rgb,
        d_feature: ro.feature.clone(),
        d_opacity: ro.opacity,
        d_weights: ro.weights.clone(),
        d_stage_weights: ro.stage.clone(),
    };
    let mut grads = t.zeros_like();
    backward_ray(&t, &r, &tape, &adj, &mut grads);
    let analytic: Vec<(String, Vec<f64>)> = grads.params().iter().map(|p| (p.name.clone(), p.data.to_vec())).collect();
    let h = 1e-4;
    let mut nonzero = std::collections::BTreeSet::new();
    for (pi, (name, a)) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let eval = |delta: f64| {
                let mut p = t.clone();
                p.params_mut()[pi].data[j] += delta;
                ro.eval(&rerender(&p, &ray, &r).unwrap())
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ok = if fd.abs() < 1e-6 && a[j].abs() < 1e-6 {
                (fd - a[j]).abs() < 1e-8
            } else {
                (fd - a[j]).abs() / fd.abs().max(a[j].abs()) < 1e-3
            };
            assert!(ok, "{name}[{j}]: analytic {}, fd {fd}", a[j]);
            if a[j] != 0.0 {
                nonzero.insert(name.split('.').take(2).collect::<Vec<_>>().join("."));
            }
        }
    }
    for class in ["subfield.0", "subfield.1", "sky.0", "video_embeddings", "proposal.0", "proposal.1"] {
        assert!(nonzero.iter().any(|n| n.starts_with(class)), "no gradient reached {class}: {nonzero:?}");
    }
}

#[test]
fn all_sky_image_and_determinism() {
    let mut t = tile();
    set_density(&mut t, -1000.0);
    let intr = CameraIntrinsics::from_fov(6, 5, 60.0);
    let pose = Pose::look_at(Vec3::new(0.0, -1.5, 1.0), Vec3::new(0.0, 0.0, 1.0), Vec3::z()).unwrap();
    let frame = CameraFrame {
        id: 0,
        video_id: 5,
        pose: pose.clone(),
        intrinsics: intr,
        rgb: vec![0.0; 90],
        features: FeatureMap::zeros(5, 6, 4),
        dynamic_mask: vec![false; 30],
        sky_mask: vec![true; 30],
    };
    let cfg = ProposalConfig { stage_samples: vec![4, 4], final_samples: 4 };
    let img = render_image(&t, &frame, &cfg, 0.1, 20.0).unwrap();
    assert!(img.opacity.iter().all(|&o| o == 0.0));
    for row in 0..5 {
        for col in 0..6 {
            let ray = camera_ray(&pose, &intr, row, col, 5, 0.1, 20.0).unwrap();
            let (c, _) = t.query_sky(&ray.direction, 5).unwrap();
            let i = (row * 6 + col) as usize * 3;
            assert_eq!(&img.rgb[i..i + 3], &c);
        }
    }
    assert_eq!(img, render_image(&t, &frame, &cfg, 0.1, 20.0).unwrap());
    let dir = tempfile::tempdir().unwrap();
    img.save(dir.path(), "v", 20.0).unwrap();
    assert!(dir.path().join("v_depth.png").exists());
    assert_eq!(FeatureMap::read(&dir.path().join("v.feat")).unwrap().dim, 4);
}

use super::*;
use crate::dataset::synthetic::{make_synthetic_scene, CameraRig, SceneSpec};
use crate::field::FieldConfig;
use crate::geometry::Aabb;
use crate::render::composite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(dim: u32) -> DatasetManifest {
    let mut spec = SceneSpec::textured_boxes(12, 10, dim);
    if let CameraRig::Orbit { count, .. } = &mut spec.cameras {
        *count = 3;
    }
    make_synthetic_scene(&spec).unwrap().0
}

fn tile_for(m: &DatasetManifest, seed: u64) -> TileField {
    let b = Aabb::new([-6.5, -6.5, -0.5], [6.5, 6.5, 3.5]);
    let mut t = TileField::new(
        FieldConfig::tiny(b, m.feature_dim as usize),
        &[Vec3::zeros(), Vec3::new(2.0, 0.0, 0.5)],
        &m.video_ids(),
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in t.params_mut() {
        if p.name.contains("grid") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    t
}

fn set_density(tile: &mut TileField, bias: f64) {
    for sf in &mut tile.subfields {
        let last = sf.trunk.layers.last_mut().unwrap();
        last.weight[..last.in_dim].fill(0.0);
        last.bias[0] = bias;
    }
}

fn cfg() -> ProposalConfig {
    ProposalConfig {
        stage_samples: vec![8, 8],
        final_samples: 8,
    }
}

#[test]
fn threshold_is_strict() {
    assert_eq!(surface_index(&[0.5, 0.1]), Some(1));
    assert_eq!(surface_index(&[0.25, 0.25, 0.01]), Some(2));
    assert_eq!(surface_index(&[0.0, 0.5, 0.0]), None);
    assert_eq!(surface_index(&[]), None);
}

#[test]
fn empty_field_yields_no_surface() {
    let m = scene(4);
    let mut t = tile_for(&m, 1);
    set_density(&mut t, -1000.0);
    let ray = m.pixel_to_ray(0, 5, 6).unwrap();
    assert_eq!(extract_surface(&t, &ray, &cfg()).unwrap(), None);
    assert!(extract_tile(&t, &m, 1, &cfg()).unwrap().is_empty());
}

#[test]
fn opaque_first_sample_is_the_surface() {
    let m = scene(4);
    let mut t = tile_for(&m, 2);
    set_density(&mut t, 1e9);
    let ray = m.pixel_to_ray(1, 4, 4).unwrap();
    let p = extract_surface(&t, &ray, &cfg()).unwrap().unwrap();
    let b = render_ray(&t, &ray, &cfg(), None).unwrap().final_batch;
    assert_eq!(p.position, b.points[0]);
    // the sub-field's own feature at x, not the composited one
    let direct = t.query(&b.points[0], &ray.direction, ray.video_id).unwrap();
    let expected: Vec<f32> = direct.feature.iter().map(|&v| v as f32).collect();
    assert_eq!(p.feature, expected);
    assert_eq!((p.video_id, p.pixel), (ray.video_id, (4, 4)));
}

#[test]
fn denser_fields_never_push_the_surface_back() {
    let m = scene(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = tile_for(&m, 3);
    for _ in 0..50 {
        let fi = rng.random_range(0..m.frames.len());
        let ray = m
            .pixel_to_ray(fi, rng.random_range(0..10), rng.random_range(0..12))
            .unwrap();
        let depths = render_ray(&base, &ray, &cfg(), None).unwrap().final_batch.depths;
        let mut last = usize::MAX;
        for shift in [-3.0, -1.0, 0.0, 1.0, 4.0, 20.0] {
            let mut t = base.clone();
            for sf in &mut t.subfields {
                sf.trunk.layers.last_mut().unwrap().bias[0] += shift;
            }
            let b = composite(&t, &ray, &depths).unwrap();
            let j = surface_index(b.weights()).unwrap_or(usize::MAX);
            assert!(j <= last);
            last = j;
        }
    }
}

#[test]
fn one_ray_per_frame_with_full_stride() {
    let m = scene(4);
    let mut t = tile_for(&m, 4);
    set_density(&mut t, 50.0);
    let pts = extract_tile(&t, &m, 12 * 10, &cfg()).unwrap();
    assert!(pts.len() <= m.frames.len());
    assert_eq!(pts.len(), 3);
    assert!(extract_tile(&t, &m, 0, &cfg()).is_err());
}

#[test]
fn dynamic_pixels_are_skipped() {
    let mut m = scene(4);
    for f in &mut m.frames {
        for (i, d) in f.dynamic_mask.iter_mut().enumerate() {
            *d = i % 3 == 0;
        }
    }
    let mut t = tile_for(&m, 5);
    set_density(&mut t, 50.0);
    let pts = extract_tile(&t, &m, 1, &cfg()).unwrap();
    assert_eq!(pts.len(), 3 * 80);
    for p in &pts {
        assert_ne!((p.pixel.0 * 12 + p.pixel.1) % 3, 0);
    }
    // image content under the mask is irrelevant
    let mut scrambled = m.clone();
    for f in &mut scrambled.frames {
        for (i, v) in f.rgb.iter_mut().enumerate() {
            if f.dynamic_mask[i / 3] {
                *v = 1.0 - *v;
            }
        }
    }
    assert_eq!(extract_tile(&t, &scrambled, 1, &cfg()).unwrap(), pts);
}

#[test]
fn extraction_ignores_thread_count() {
    let m = scene(4);
    let t = tile_for(&m, 6);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| extract_tile(&t, &m, 2, &cfg()).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn extracted_points_downsample_and_persist() {
    let m = scene(4);
    let mut t = tile_for(&m, 7);
    set_density(&mut t, 50.0);
    let pts = extract_tile(&t, &m, 3, &cfg()).unwrap();
    let g = voxel_downsample(&pts, 0.5, Vec3::zeros()).unwrap();
    let total: f64 = g.cells().map(|(_, c)| c.weight()).sum();
    assert_eq!(total, pts.len() as f64);
    let back = read_prior(&write_prior(&g).unwrap(), "t").unwrap();
    assert_eq!(back, g);
}

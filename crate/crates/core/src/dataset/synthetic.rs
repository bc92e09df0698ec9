//! Analytic scenes of axis-aligned textured boxes and rectangles.
//!
//! Every pixel is rendered by exact ray–primitive intersection, and the
//! returned [`SceneOracle`] answers depth/color/feature queries for arbitrary
//! rays with the same arithmetic, so it doubles as ground truth for tests.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::manifest::quantize;
use super::{
    CameraFrame, CameraIntrinsics, DatasetManifest, DatasetRole, FeatureMap, Pose, Ray,
};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

/// Smooth periodic color: `base + amplitude · sin(2πu/p) · sin(2πv/p)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f32; 3],
    pub amplitude: f32,
    pub period: f64,
}

impl Texture {
    pub fn flat(base: [f32; 3]) -> Self {
        Self {
            base,
            amplitude: 0.0,
            period: 1.0,
        }
    }

    fn color(&self, u: f64, v: f64) -> [f32; 3] {
        let s = ((2.0 * PI * u / self.period).sin() * (2.0 * PI * v / self.period).sin()) as f32;
        self.base.map(|b| b + self.amplitude * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Solid axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
        feature: Vec<f32>,
    },
    /// Two-sided rectangle perpendicular to `axis` at `offset`; `min`/`max`
    /// bound the remaining two axes in increasing axis order.
    Rect {
        axis: usize,
        offset: f64,
        min: [f64; 2],
        max: [f64; 2],
        texture: Texture,
        feature: Vec<f32>,
    },
}

impl Primitive {
    fn feature(&self) -> &[f32] {
        match self {
            Primitive::Box { feature, .. } | Primitive::Rect { feature, .. } => feature,
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Box { texture, .. } | Primitive::Rect { texture, .. } => texture,
        }
    }

    fn validate(&self, index: usize, feature_dim: u32) -> Result<()> {
        let degenerate = match self {
            Primitive::Box { min, max, .. } => (0..3).any(|a| max[a] <= min[a]),
            Primitive::Rect { axis, min, max, .. } => {
                *axis > 2 || (0..2).any(|a| max[a] <= min[a])
            }
        };
        if degenerate {
            return Err(Error::InvalidArgument(format!(
                "primitive {index} has degenerate (zero-extent) geometry"
            )));
        }
        if self.feature().len() != feature_dim as usize {
            return Err(Error::InvalidArgument(format!(
                "primitive {index} feature has {} entries, expected {feature_dim}",
                self.feature().len()
            )));
        }
        Ok(())
    }

    /// Nearest hit `t` in `[t_min, t_max]` and the face axis.
    fn intersect(&self, o: &Vec3, d: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        match self {
            Primitive::Box { min, max, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut enter_axis = 0;
                let mut exit_axis = 0;
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        enter_axis = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        exit_axis = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 >= t_min && t0 <= t_max {
                    Some((t0, enter_axis))
                } else if t0 < t_min && t1 >= t_min && t1 <= t_max {
                    Some((t1, exit_axis))
                } else {
                    None
                }
            }
            Primitive::Rect {
                axis,
                offset,
                min,
                max,
                ..
            } => {
                let a = *axis;
                if d[a] == 0.0 {
                    return None;
                }
                let t = (offset - o[a]) / d[a];
                if t < t_min || t > t_max {
                    return None;
                }
                let p = o + d * t;
                let (u, v) = other_axes(a);
                let inside = p[u] >= min[0] && p[u] <= max[0] && p[v] >= min[1] && p[v] <= max[1];
                inside.then_some((t, a))
            }
        }
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Sky appearance: vertical gradient from `horizon` to `zenith` by the ray's
/// elevation, and one constant semantic feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkySpec {
    pub horizon: [f32; 3],
    pub zenith: [f32; 3],
    pub feature: Vec<f32>,
}

impl SkySpec {
    fn color(&self, d: &Vec3) -> [f32; 3] {
        let s = d[2].clamp(0.0, 1.0) as f32;
        std::array::from_fn(|c| self.horizon[c] + (self.zenith[c] - self.horizon[c]) * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraRig {
    /// `count` cameras evenly spaced on a horizontal circle, all looking at
    /// `target`.
    Orbit {
        center: [f64; 3],
        radius: f64,
        height: f64,
        count: u32,
        target: [f64; 3],
    },
    /// Explicit row-major world-from-camera matrices.
    Poses { world_from_camera: Vec<[[f64; 4]; 4]> },
}

impl CameraRig {
    pub fn poses(&self) -> Result<Vec<Pose>> {
        match self {
            CameraRig::Orbit {
                center,
                radius,
                height,
                count,
                target,
            } => (0..*count)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / *count as f64;
                    let eye = Vec3::new(
                        center[0] + radius * th.cos(),
                        center[1] + radius * th.sin(),
                        center[2] + height,
                    );
                    Pose::look_at(eye, Vec3::from(*target), Vec3::z())
                })
                .collect(),
            CameraRig::Poses { world_from_camera } => {
                world_from_camera.iter().map(Pose::from_matrix).collect()
            }
        }
    }
}

/// Scene description for [`make_synthetic_scene`]. World frame is z-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub sky: SkySpec,
    pub cameras: CameraRig,
    pub width: u32,
    pub height: u32,
    pub fov_y_deg: f64,
    pub feature_dim: u32,
    /// Number of distinct video ids; cameras are assigned round-robin.
    pub videos: u32,
    pub near: f64,
    pub far: f64,
    /// Suggested tile bounds enclosing all geometry and cameras.
    pub bounds: Aabb,
}

fn feature_vec(dim: u32, seed: u32) -> Vec<f32> {
    // fixed, well-separated unit-scale features
    (0..dim)
        .map(|i| (0.6 * ((seed * 7 + i * 3) as f32 * 1.3).sin()).clamp(-1.0, 1.0))
        .collect()
}

impl SceneSpec {
    /// Ground plane with two textured boxes and a 20-camera orbit.
    pub fn textured_boxes(width: u32, height: u32, feature_dim: u32) -> Self {
        Self {
            primitives: vec![
                Primitive::Rect {
                    axis: 2,
                    offset: 0.0,
                    min: [-6.0, -6.0],
                    max: [6.0, 6.0],
                    texture: Texture {
                        base: [0.45, 0.42, 0.38],
                        amplitude: 0.12,
                        period: 3.0,
                    },
                    feature: feature_vec(feature_dim, 1),
                },
                Primitive::Box {
                    min: [-1.2, -0.8, 0.0],
                    max: [0.6, 1.0, 1.4],
                    texture: Texture {
                        base: [0.75, 0.35, 0.25],
                        amplitude: 0.15,
                        period: 1.6,
                    },
                    feature: feature_vec(feature_dim, 2),
                },
                Primitive::Box {
                    min: [1.2, -2.0, 0.0],
                    max: [2.2, -1.0, 0.8],
                    texture: Texture {
                        base: [0.25, 0.45, 0.7],
                        amplitude: 0.12,
                        period: 1.2,
                    },
                    feature: feature_vec(feature_dim, 3),
                },
            ],
            sky: SkySpec {
                horizon: [0.8, 0.85, 0.9],
                zenith: [0.45, 0.6, 0.85],
                feature: feature_vec(feature_dim, 9),
            },
            cameras: CameraRig::Orbit {
                center: [0.0, 0.0, 0.0],
                radius: 4.5,
                height: 1.6,
                count: 20,
                target: [0.0, 0.0, 0.5],
            },
            width,
            height,
            fov_y_deg: 60.0,
            feature_dim,
            videos: 2,
            near: 0.1,
            far: 200.0,
            bounds: Aabb::new([-6.5, -6.5, -0.5], [6.5, 6.5, 3.5]),
        }
    }

    /// A single ground rectangle at z = 0 under sky, seen from an orbit so
    /// that every image has both ground and sky.
    pub fn opaque_plane(width: u32, height: u32, feature_dim: u32, cameras: u32) -> Self {
        Self {
            primitives: vec![Primitive::Rect {
                axis: 2,
                offset: 0.0,
                min: [-6.0, -6.0],
                max: [6.0, 6.0],
                // fine, high-contrast pattern so depth is recoverable from parallax
                texture: Texture {
                    base: [0.4, 0.5, 0.35],
                    amplitude: 0.3,
                    period: 1.0,
                },
                feature: feature_vec(feature_dim, 4),
            }],
            sky: SkySpec {
                horizon: [0.8, 0.85, 0.9],
                zenith: [0.45, 0.6, 0.85],
                feature: feature_vec(feature_dim, 9),
            },
            cameras: CameraRig::Orbit {
                center: [0.0, 0.0, 0.0],
                radius: 3.0,
                height: 1.5,
                count: cameras,
                target: [0.0, 0.0, 0.9],
            },
            width,
            height,
            fov_y_deg: 60.0,
            feature_dim,
            videos: 1,
            near: 0.1,
            far: 200.0,
            bounds: Aabb::new([-6.5, -6.5, -0.5], [6.5, 6.5, 3.0]),
        }
    }

    /// No geometry at all: every pixel is sky.
    pub fn empty(width: u32, height: u32, feature_dim: u32, sky: [f32; 3]) -> Self {
        let mut s = Self::opaque_plane(width, height, feature_dim, 4);
        s.primitives.clear();
        s.sky.horizon = sky;
        s.sky.zenith = sky;
        s
    }
}

/// Ground truth along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    /// Distance along the (unit) ray to the first surface, if any.
    pub depth: Option<f64>,
    /// 8-bit quantized color, as stored in the rendered images.
    pub rgb: [f32; 3],
    pub feature: Vec<f32>,
    pub is_sky: bool,
}

#[derive(Clone, Debug)]
pub struct SceneOracle {
    spec: SceneSpec,
}

impl SceneOracle {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// First intersection in `[ray.near, ray.far]`: `(t, primitive, face axis)`.
    pub fn first_hit(&self, ray: &Ray) -> Option<(f64, usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            let t_max = best.map_or(ray.far, |b| b.0);
            if let Some((t, axis)) = p.intersect(&ray.origin, &ray.direction, ray.near, t_max) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, i, axis));
                }
            }
        }
        best
    }

    pub fn depth(&self, ray: &Ray) -> Option<f64> {
        self.first_hit(ray).map(|h| h.0)
    }

    pub fn query(&self, ray: &Ray) -> OracleSample {
        match self.first_hit(ray) {
            Some((t, i, axis)) => {
                let prim = &self.spec.primitives[i];
                let p = ray.at(t);
                let (u, v) = other_axes(axis);
                let c = prim.texture().color(p[u], p[v]);
                OracleSample {
                    depth: Some(t),
                    rgb: c.map(|x| quantize(x) as f32 / 255.0),
                    feature: prim.feature().to_vec(),
                    is_sky: false,
                }
            }
            None => OracleSample {
                depth: None,
                rgb: self
                    .spec
                    .sky
                    .color(&ray.direction)
                    .map(|x| quantize(x) as f32 / 255.0),
                feature: self.spec.sky.feature.clone(),
                is_sky: true,
            },
        }
    }
}

/// Renders every camera of `spec` and returns the manifest together with
/// the oracle that produced it.
pub fn make_synthetic_scene(spec: &SceneSpec) -> Result<(DatasetManifest, SceneOracle)> {
    for (i, p) in spec.primitives.iter().enumerate() {
        p.validate(i, spec.feature_dim)?;
    }
    if spec.sky.feature.len() != spec.feature_dim as usize {
        return Err(Error::InvalidArgument("sky feature dimension mismatch".into()));
    }
    if spec.videos == 0 {
        return Err(Error::InvalidArgument("scene needs at least one video".into()));
    }
    let intr = CameraIntrinsics::from_fov(spec.width, spec.height, spec.fov_y_deg);
    intr.validate()?;
    let oracle = SceneOracle { spec: spec.clone() };
    let mut manifest = DatasetManifest::new(DatasetRole::Train, spec.feature_dim);
    manifest.near = spec.near;
    manifest.far = spec.far;
    for (k, pose) in spec.cameras.poses()?.into_iter().enumerate() {
        let n = intr.pixel_count();
        let mut frame = CameraFrame {
            id: k as u32,
            video_id: k as u32 % spec.videos,
            pose,
            intrinsics: intr,
            rgb: vec![0.0; n * 3],
            features: FeatureMap::zeros(spec.height, spec.width, spec.feature_dim),
            dynamic_mask: vec![false; n],
            sky_mask: vec![false; n],
        };
        for row in 0..spec.height {
            for col in 0..spec.width {
                let ray = frame.pixel_to_ray(row, col, spec.near, spec.far)?;
                let s = oracle.query(&ray);
                let idx = frame.pixel_index(row, col);
                frame.rgb[idx * 3..idx * 3 + 3].copy_from_slice(&s.rgb);
                frame.features.pixel_mut(row, col).copy_from_slice(&s.feature);
                frame.sky_mask[idx] = s.is_sky;
            }
        }
        manifest.frames.push(frame);
    }
    Ok((manifest, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_scene_is_all_sky() {
        let spec = SceneSpec::empty(8, 6, 4, [0.5, 0.5, 0.5]);
        let (m, _) = make_synthetic_scene(&spec).unwrap();
        for f in &m.frames {
            assert!(f.sky_mask.iter().all(|&s| s));
            assert!(f.rgb.iter().all(|&v| v == 128.0 / 255.0));
        }
    }

    #[test]
    fn plane_depth_along_principal_ray() {
        let spec = SceneSpec {
            primitives: vec![Primitive::Rect {
                axis: 2,
                offset: 5.0,
                min: [-100.0, -100.0],
                max: [100.0, 100.0],
                texture: Texture::flat([0.2, 0.3, 0.4]),
                feature: vec![1.0; 4],
            }],
            cameras: CameraRig::Poses {
                world_from_camera: vec![Pose::identity().to_matrix()],
            },
            ..SceneSpec::empty(9, 9, 4, [0.5; 3])
        };
        let (m, oracle) = make_synthetic_scene(&spec).unwrap();
        let ray = m.pixel_to_ray(0, 4, 4).unwrap();
        assert_eq!(oracle.depth(&ray), Some(5.0));
        assert!(!m.frames[0].sky_mask[m.frames[0].pixel_index(4, 4)]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let mut spec = SceneSpec::textured_boxes(8, 8, 4);
        spec.primitives.push(Primitive::Box {
            min: [0.0, 0.0, 0.0],
            max: [1.0, 0.0, 1.0],
            texture: Texture::flat([0.0; 3]),
            feature: vec![0.0; 4],
        });
        assert!(make_synthetic_scene(&spec).is_err());
    }

    /// Independent brute force: each box face as its own rectangle.
    fn brute_force_depth(spec: &SceneSpec, ray: &Ray) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t >= ray.near && t <= ray.far && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        for p in &spec.primitives {
            let mut rects = Vec::new();
            match p {
                Primitive::Box { min, max, .. } => {
                    for axis in 0..3 {
                        let (u, v) = other_axes(axis);
                        for off in [min[axis], max[axis]] {
                            rects.push((axis, off, [min[u], min[v]], [max[u], max[v]]));
                        }
                    }
                }
                Primitive::Rect {
                    axis,
                    offset,
                    min,
                    max,
                    ..
                } => rects.push((*axis, *offset, *min, *max)),
            }
            for (axis, off, lo, hi) in rects {
                if ray.direction[axis] == 0.0 {
                    continue;
                }
                let t = (off - ray.origin[axis]) / ray.direction[axis];
                let p = ray.at(t);
                let (u, v) = other_axes(axis);
                let eps = 1e-9;
                if p[u] >= lo[0] - eps && p[u] <= hi[0] + eps && p[v] >= lo[1] - eps && p[v] <= hi[1] + eps {
                    consider(t);
                }
            }
        }
        best
    }

    #[test]
    fn box_scene_depth_matches_brute_force_faces() {
        let spec = SceneSpec::textured_boxes(16, 16, 4);
        let (m, oracle) = make_synthetic_scene(&spec).unwrap();
        assert_eq!(m.frames.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..1000 {
            let f = rng.random_range(0..m.frames.len());
            let ray = m
                .pixel_to_ray(f, rng.random_range(0..16), rng.random_range(0..16))
                .unwrap();
            let a = oracle.depth(&ray);
            let b = brute_force_depth(&spec, &ray);
            match (a, b) {
                (Some(a), Some(b)) => {
                    hits += 1;
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn oracle_reproduces_rendered_images() {
        let spec = SceneSpec::textured_boxes(12, 10, 3);
        let (m, oracle) = make_synthetic_scene(&spec).unwrap();
        for (fi, f) in m.frames.iter().enumerate() {
            for row in 0..10 {
                for col in 0..12 {
                    let ray = m.pixel_to_ray(fi, row, col).unwrap();
                    let s = oracle.query(&ray);
                    assert_eq!(s.rgb, f.rgb_at(row, col));
                    assert_eq!(s.feature.as_slice(), f.features.pixel(row, col));
                    assert_eq!(s.is_sky, f.sky_mask[f.pixel_index(row, col)]);
                }
            }
        }
    }

    #[test]
    fn camera_rig_is_json_round_trippable() {
        let spec = SceneSpec::textured_boxes(4, 4, 2);
        let text = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}

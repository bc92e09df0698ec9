use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Ray};
use crate::error::{Error, Result};

/// A supervised ray drawn from a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub frame: usize,
    pub ray: Ray,
    pub target_rgb: [f32; 3],
    pub target_feature: Vec<f32>,
    pub is_sky: bool,
}

/// Flat index of the pixels eligible for supervision (non-dynamic),
/// grouped per frame. Sampling from the pool is uniform over its pixels.
#[derive(Clone, Debug)]
pub struct PixelPool {
    per_frame: Vec<Vec<u32>>,
    /// `offsets[i]` = number of pooled pixels in frames `< i`.
    offsets: Vec<usize>,
    total: usize,
}

impl PixelPool {
    /// All non-dynamic pixels of every frame.
    pub fn new(manifest: &DatasetManifest) -> Self {
        Self::filtered(manifest, |_, _| true)
    }

    /// Non-dynamic pixels for which `keep(frame_index, pixel_index)` holds.
    pub fn filtered(manifest: &DatasetManifest, keep: impl Fn(usize, usize) -> bool) -> Self {
        let per_frame: Vec<Vec<u32>> = manifest
            .frames
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                f.dynamic_mask
                    .iter()
                    .enumerate()
                    .filter(|&(p, &dynamic)| !dynamic && keep(fi, p))
                    .map(|(p, _)| p as u32)
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(per_frame.len());
        let mut total = 0;
        for px in &per_frame {
            offsets.push(total);
            total += px.len();
        }
        Self {
            per_frame,
            offsets,
            total,
        }
    }

    /// Splits non-dynamic pixels into a training pool and a held-out pool
    /// containing roughly one in `every` pixels (hash-selected, deterministic).
    pub fn split_holdout(manifest: &DatasetManifest, every: u64) -> (Self, Self) {
        if every == 0 {
            return (Self::new(manifest), Self::filtered(manifest, |_, _| false));
        }
        let held = move |f: usize, p: usize| splitmix64(((f as u64) << 32) ^ p as u64) % every == 0;
        (
            Self::filtered(manifest, move |f, p| !held(f, p)),
            Self::filtered(manifest, held),
        )
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Pixel `(frame index, flat pixel index)` at pool position `i`.
    pub fn get(&self, i: usize) -> (usize, usize) {
        let frame = self.offsets.partition_point(|&o| o <= i) - 1;
        (frame, self.per_frame[frame][i - self.offsets[frame]] as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_frame
            .iter()
            .enumerate()
            .flat_map(|(f, px)| px.iter().map(move |&p| (f, p as usize)))
    }

    pub fn ray_sample(&self, manifest: &DatasetManifest, frame: usize, pixel: usize) -> RaySample {
        let f = &manifest.frames[frame];
        let w = f.width() as usize;
        let (row, col) = ((pixel / w) as u32, (pixel % w) as u32);
        let ray = f
            .pixel_to_ray(row, col, manifest.near, manifest.far)
            .expect("pooled pixels are in bounds");
        RaySample {
            frame,
            ray,
            target_rgb: f.rgb_at(row, col),
            target_feature: f.features.pixel(row, col).to_vec(),
            is_sky: f.sky_mask[pixel],
        }
    }

    /// Draws `batch_size` pixels uniformly with replacement.
    pub fn sample(
        &self,
        manifest: &DatasetManifest,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<RaySample>> {
        if self.total == 0 {
            return Err(Error::Data(
                "no supervisable pixels: every pixel is dynamic-masked".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..batch_size)
            .map(|_| {
                let (f, p) = self.get(rng.random_range(0..self.total));
                self.ray_sample(manifest, f, p)
            })
            .collect())
    }
}

/// Uniformly samples non-dynamic pixels across all frames; sky pixels are
/// included. Deterministic for a fixed seed.
pub fn sample_ray_batch(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<RaySample>> {
    PixelPool::new(manifest).sample(manifest, batch_size, seed)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

//! Tile and sub-field placement by two-level K-Means over camera positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec3>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub wcss_history: Vec<f64>,
}

impl KMeans {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec3], p: &Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops when no label changes or
/// after [`MAX_ITERATIONS`] assignment steps.
pub fn kmeans(points: &[Vec3], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidArgument("kmeans: k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "kmeans: k = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut wcss_history = Vec::new();

    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut wcss = 0.0;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let j = nearest_centroid(&centroids, p);
            wcss += (p - centroids[j]).norm_squared();
            if *label != j {
                *label = j;
                changed = true;
            }
        }
        wcss_history.push(wcss);
        if !changed {
            break;
        }
        update_centroids(points, &labels, &mut centroids);
    }
    Ok(KMeans {
        centroids,
        labels,
        wcss_history,
    })
}

fn kmeans_plus_plus(points: &[Vec3], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - centroids[0]).norm_squared())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min((p - c).norm_squared());
        }
        centroids.push(c);
    }
    centroids
}

fn update_centroids(points: &[Vec3], labels: &[usize], centroids: &mut [Vec3]) {
    let k = centroids.len();
    let mut sums = vec![Vec3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = sums[j] / counts[j] as f64;
        }
    }
    // empty clusters: move onto the point farthest from its own centroid
    for j in 0..k {
        if counts[j] == 0 {
            let far = points
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (p, &l))| (i, (p - centroids[l]).norm_squared()))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            centroids[j] = points[far.0];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tile_centroids: Vec<Vec3>,
    pub subfield_centroids_per_tile: Vec<Vec<Vec3>>,
    /// Frame index → tile index.
    pub assignments: Vec<usize>,
}

impl TilePlan {
    pub fn frames_in_tile(&self, tile: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == tile)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tile plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("tile plan: {e}")))?;
        if plan.tile_centroids.len() != plan.subfield_centroids_per_tile.len()
            || plan.subfield_centroids_per_tile.iter().any(|c| c.is_empty())
            || plan.assignments.iter().any(|&t| t >= plan.tile_centroids.len())
        {
            return Err(Error::Data("tile plan is inconsistent".into()));
        }
        Ok(plan)
    }
}

/// First-level K-Means over camera positions defines tiles (Voronoi cells of
/// the tile centroids); second-level K-Means over each tile's cameras places
/// its sub-field centroids.
pub fn plan_tiles(
    manifest: &DatasetManifest,
    num_tiles: usize,
    subfields_per_tile: usize,
    seed: u64,
) -> Result<TilePlan> {
    if subfields_per_tile == 0 {
        return Err(Error::InvalidArgument(
            "subfields_per_tile must be at least 1".into(),
        ));
    }
    let positions: Vec<Vec3> = manifest.frames.iter().map(|f| f.pose.translation).collect();
    let tiles = kmeans(&positions, num_tiles, seed)?;
    let assignments: Vec<usize> = positions
        .iter()
        .map(|p| nearest_centroid(&tiles.centroids, p))
        .collect();
    let mut subfield_centroids_per_tile = Vec::with_capacity(num_tiles);
    for t in 0..num_tiles {
        let members: Vec<Vec3> = positions
            .iter()
            .zip(&assignments)
            .filter(|&(_, &a)| a == t)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "tile {t} has no cameras; not enough distinct camera positions"
            )));
        }
        let sub = kmeans(&members, subfields_per_tile, seed.wrapping_add(1 + t as u64))?;
        subfield_centroids_per_tile.push(sub.centroids);
    }
    Ok(TilePlan {
        tile_centroids: tiles.centroids,
        subfield_centroids_per_tile,
        assignments,
    })
}

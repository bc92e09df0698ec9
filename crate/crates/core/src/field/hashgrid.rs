//! Multi-resolution hash grid with trilinear interpolation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
const INIT_RANGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub num_levels: usize,
    /// Cells per axis at the coarsest level.
    pub min_resolution: u32,
    /// Cells per axis at the finest level.
    pub max_resolution: u32,
    pub features_per_level: usize,
    /// Entries per level; must be a power of two.
    pub table_capacity: usize,
    pub bounding_box: Aabb,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("hash grid: {m}")));
        if self.num_levels == 0 || self.features_per_level == 0 {
            return bad("num_levels and features_per_level must be positive");
        }
        if self.min_resolution < 2 {
            return bad("min_resolution must be at least 2");
        }
        if self.max_resolution < self.min_resolution {
            return bad("max_resolution must be >= min_resolution");
        }
        if !self.table_capacity.is_power_of_two() {
            return bad("table_capacity must be a power of two");
        }
        if !self.bounding_box.is_valid() {
            return bad("bounding box must have positive extent");
        }
        Ok(())
    }

    /// Per-level geometric growth factor.
    pub fn growth_factor(&self) -> f64 {
        if self.num_levels == 1 {
            return 1.0;
        }
        ((self.max_resolution as f64).ln() - (self.min_resolution as f64).ln()).exp()
            .powf(1.0 / (self.num_levels - 1) as f64)
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        let r = self.min_resolution as f64 * self.growth_factor().powi(level as i32);
        (r.round() as u32).clamp(self.min_resolution, self.max_resolution)
    }

    /// Table entries for `level` and whether the level is stored densely.
    pub fn level_entries(&self, level: usize) -> (usize, bool) {
        let side = self.level_resolution(level) as usize + 1;
        let dense = side.checked_pow(3).filter(|&v| v <= self.table_capacity);
        match dense {
            Some(v) => (v, true),
            None => (self.table_capacity, false),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    resolution: u32,
    dense: bool,
    entries: usize,
}

/// Interpolation record for one encoded point: per level, the 8 table slots
/// and their trilinear weights.
#[derive(Clone, Debug, Default)]
pub struct HashTrace {
    pub slots: Vec<u32>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    levels: Vec<Level>,
    /// One `entries × features_per_level` table per level.
    pub tables: Vec<Vec<f64>>,
}

impl HashGrid {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let levels: Vec<Level> = (0..config.num_levels)
            .map(|l| {
                let (entries, dense) = config.level_entries(l);
                Level {
                    resolution: config.level_resolution(l),
                    dense,
                    entries,
                }
            })
            .collect();
        let tables = levels
            .iter()
            .map(|lv| vec![0.0; lv.entries * config.features_per_level])
            .collect();
        Ok(Self {
            config,
            levels,
            tables,
        })
    }

    pub fn new(config: HashGridConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut g = Self::zeros(config)?;
        for t in &mut g.tables {
            for v in t.iter_mut() {
                *v = rng.random_range(-INIT_RANGE..INIT_RANGE);
            }
        }
        Ok(g)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            levels: self.levels.clone(),
            tables: self.tables.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        self.levels[level].resolution
    }

    pub fn is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Table slot of lattice vertex `(i, j, k)` at `level`.
    pub fn slot(&self, level: usize, i: u32, j: u32, k: u32) -> usize {
        let lv = &self.levels[level];
        if lv.dense {
            let side = lv.resolution as usize + 1;
            i as usize + side * (j as usize + side * k as usize)
        } else {
            let h = i.wrapping_mul(PRIMES[0]) ^ j.wrapping_mul(PRIMES[1]) ^ k.wrapping_mul(PRIMES[2]);
            h as usize & (lv.entries - 1)
        }
    }

    /// Encodes `x` (clamped into the bounding box) into `out`
    /// (`num_levels × features_per_level`), appending interpolation records
    /// to `trace` when given.
    pub fn encode_into(&self, x: &Vec3, out: &mut [f64], trace: Option<&mut HashTrace>) {
        let f = self.config.features_per_level;
        let u = self.config.bounding_box.normalize(x);
        let mut slots = [0u32; 8];
        let mut weights = [0.0f64; 8];
        let (mut slot_sink, mut weight_sink) = match trace {
            Some(t) => {
                let n = t.slots.len();
                let add = self.levels.len() * 8;
                t.slots.resize(n + add, 0);
                t.weights.resize(n + add, 0.0);
                (Some(&mut t.slots[n..]), Some(&mut t.weights[n..]))
            }
            None => (None, None),
        };
        for (l, lv) in self.levels.iter().enumerate() {
            let r = lv.resolution;
            // per axis: lattice coordinate of both corners and their weights
            let mut idx = [[0u32; 2]; 3];
            let mut wt = [[0.0f64; 2]; 3];
            for a in 0..3 {
                let p = u[a] * r as f64;
                // u is in [0, 1] so truncation is floor
                let c = (p as u32).min(r - 1);
                let t = p - c as f64;
                idx[a] = [c, c + 1];
                wt[a] = [1.0 - t, t];
            }
            if lv.dense {
                let side = r + 1;
                for a in 0..2 {
                    idx[1][a] *= side;
                    idx[2][a] *= side * side;
                }
                for c in 0..8 {
                    slots[c] = idx[0][c & 1] + idx[1][(c >> 1) & 1] + idx[2][c >> 2];
                }
            } else {
                let mask = (lv.entries - 1) as u32;
                for a in 0..2 {
                    idx[0][a] = idx[0][a].wrapping_mul(PRIMES[0]);
                    idx[1][a] = idx[1][a].wrapping_mul(PRIMES[1]);
                    idx[2][a] = idx[2][a].wrapping_mul(PRIMES[2]);
                }
                for c in 0..8 {
                    slots[c] = (idx[0][c & 1] ^ idx[1][(c >> 1) & 1] ^ idx[2][c >> 2]) & mask;
                }
            }
            for c in 0..8 {
                weights[c] = wt[0][c & 1] * wt[1][(c >> 1) & 1] * wt[2][c >> 2];
            }
            let dst = &mut out[l * f..(l + 1) * f];
            let table = &self.tables[l];
            if f == 2 || f == 1 {
                // common small widths, unrolled by the compiler
                let mut acc = [0.0f64; 2];
                for c in 0..8 {
                    let s = slots[c] as usize * f;
                    for k in 0..f {
                        acc[k] += weights[c] * table[s + k];
                    }
                }
                dst.copy_from_slice(&acc[..f]);
            } else {
                dst.fill(0.0);
                for c in 0..8 {
                    let s = slots[c] as usize * f;
                    for (d, e) in dst.iter_mut().zip(&table[s..s + f]) {
                        *d += weights[c] * e;
                    }
                }
            }
            if let (Some(ss), Some(ws)) = (slot_sink.as_deref_mut(), weight_sink.as_deref_mut()) {
                ss[l * 8..l * 8 + 8].copy_from_slice(&slots);
                ws[l * 8..l * 8 + 8].copy_from_slice(&weights);
            }
        }
    }

    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out, None);
        out
    }

    /// Scatters `d_out` (`n × output_dim`) back into `grads` through the
    /// recorded trilinear weights of `n` points.
    pub fn backward(&self, trace: &HashTrace, d_out: &[f64], grads: &mut HashGrid) {
        let f = self.config.features_per_level;
        let dim = self.output_dim();
        let per_point = self.levels.len() * 8;
        let n = trace.slots.len() / per_point;
        for p in 0..n {
            for l in 0..self.levels.len() {
                let d = &d_out[p * dim + l * f..p * dim + (l + 1) * f];
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let table = &mut grads.tables[l];
                for c in 0..8 {
                    let k = p * per_point + l * 8 + c;
                    let (s, w) = (trace.slots[k] as usize, trace.weights[k]);
                    for (g, dv) in table[s * f..(s + 1) * f].iter_mut().zip(d) {
                        *g += w * dv;
                    }
                }
            }
        }
    }
}

//! Throughput measurements for the hot kernels, reported as CSV.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::extract::{voxel_downsample, SurfacePoint};
use crate::field::{HashGrid, HashGridConfig};
use crate::geometry::{Aabb, Vec3};
use crate::render::Compositing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Kernel {
    /// Desk-preset hash grid encoding of random points.
    HashEncode,
    /// Compositing of random rays on one thread.
    Composite,
    /// Compositing of random rays across the rayon pool.
    CompositeParallel,
    /// Voxel downsampling of random surface points.
    VoxelScatter,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::HashEncode,
        Kernel::Composite,
        Kernel::CompositeParallel,
        Kernel::VoxelScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::HashEncode => "hash_encode",
            Kernel::Composite => "composite",
            Kernel::CompositeParallel => "composite_parallel",
            Kernel::VoxelScatter => "voxel_scatter",
        }
    }

    pub fn parse(name: &str) -> Option<Kernel> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn unit(self) -> &'static str {
        match self {
            Kernel::Composite | Kernel::CompositeParallel => "rays/s",
            _ => "points/s",
        }
    }

    /// Items per repetition at `scale = 1`.
    fn default_size(self) -> usize {
        match self {
            Kernel::HashEncode => 1_000_000,
            Kernel::Composite | Kernel::CompositeParallel => 10_000,
            Kernel::VoxelScatter => 1_000_000,
        }
    }
}

pub const COMPOSITE_SAMPLES: usize = 96;
pub const MIN_REPETITIONS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Clamped up to [`MIN_REPETITIONS`].
    pub repetitions: usize,
    /// Multiplies every kernel's input size.
    pub scale: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: MIN_REPETITIONS,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub kernel: String,
    pub input_size: usize,
    pub unit: String,
    /// Median over repetitions.
    pub throughput: f64,
    pub median_seconds: f64,
    pub repetitions: usize,
    pub threads: usize,
    pub machine: String,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "kernel,input_size,unit,throughput,median_seconds,repetitions,threads,machine";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.6e},{},{},\"{}\"",
            self.kernel,
            self.input_size,
            self.unit,
            self.throughput,
            self.median_seconds,
            self.repetitions,
            self.threads,
            self.machine.replace('"', "'")
        )
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(BenchReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// CPU model (when the OS exposes it), architecture and thread count.
pub fn machine_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{model} ({} {}, {} hw threads)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct CompositeInput {
    depths: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
}

fn composite_input(rays: usize, rng: &mut ChaCha8Rng) -> CompositeInput {
    let mut depths = Vec::with_capacity(rays);
    let mut sigma = Vec::with_capacity(rays);
    for _ in 0..rays {
        let mut d: Vec<f64> = (0..COMPOSITE_SAMPLES).map(|_| rng.random_range(0.1..50.0)).collect();
        d.sort_by(f64::total_cmp);
        depths.push(d);
        sigma.push((0..COMPOSITE_SAMPLES).map(|_| rng.random_range(0.0..2.0)).collect());
    }
    CompositeInput { depths, sigma }
}

fn composite_all(input: &CompositeInput, parallel: bool) -> f64 {
    let one = |(d, s): (&Vec<f64>, &Vec<f64>)| Compositing::new(d, 50.0, s).opacity();
    if parallel {
        input.depths.par_iter().zip(&input.sigma).map(one).sum()
    } else {
        input.depths.iter().zip(&input.sigma).map(one).sum()
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let mut sink = 0.0;
    let times = (0..reps)
        .map(|_| {
            let t = Instant::now();
            sink += f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    std::hint::black_box(sink);
    times
}

pub fn run_benchmark(kernel: Kernel, opts: &BenchOptions) -> BenchReport {
    let reps = opts.repetitions.max(MIN_REPETITIONS);
    let size = ((kernel.default_size() as f64 * opts.scale).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let times = match kernel {
        Kernel::HashEncode => {
            let bounds = Aabb::new([-10.0; 3], [10.0; 3]);
            let cfg = HashGridConfig {
                num_levels: 8,
                min_resolution: 8,
                max_resolution: 256,
                features_per_level: 2,
                table_capacity: 1 << 15,
                bounding_box: bounds,
            };
            let grid = HashGrid::new(cfg, &mut rng).expect("valid bench grid");
            let pts: Vec<Vec3> = (0..size)
                .map(|_| Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
                .collect();
            let mut out = vec![0.0; grid.output_dim()];
            time_reps(reps, || {
                let mut acc = 0.0;
                for p in &pts {
                    grid.encode_into(p, &mut out, None);
                    acc += out[0];
                }
                acc
            })
        }
        Kernel::Composite | Kernel::CompositeParallel => {
            let input = composite_input(size, &mut rng);
            let parallel = kernel == Kernel::CompositeParallel;
            time_reps(reps, || composite_all(&input, parallel))
        }
        Kernel::VoxelScatter => {
            let pts: Vec<SurfacePoint> = (0..size)
                .map(|_| SurfacePoint {
                    position: Vec3::from_fn(|_, _| rng.random_range(-20.0..20.0)),
                    feature: (0..8).map(|_| rng.random::<f32>()).collect(),
                    video_id: 0,
                    pixel: (0, 0),
                })
                .collect();
            time_reps(reps, || {
                voxel_downsample(&pts, 0.2, Vec3::zeros())
                    .expect("valid bench voxel size")
                    .len() as f64
            })
        }
    };
    let med = median(times);
    BenchReport {
        kernel: kernel.name().into(),
        input_size: size,
        unit: kernel.unit().into(),
        throughput: size as f64 / med.max(1e-12),
        median_seconds: med,
        repetitions: reps,
        threads: if kernel == Kernel::CompositeParallel {
            rayon::current_num_threads()
        } else {
            1
        },
        machine: machine_descriptor(),
    }
}

pub fn run_benchmarks(selection: &[Kernel], opts: &BenchOptions) -> Vec<BenchReport> {
    selection.iter().map(|&k| run_benchmark(k, opts)).collect()
}

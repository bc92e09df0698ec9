use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use neural_prior::bench::{run_benchmarks, to_csv, BenchOptions, Kernel};
use neural_prior::config::{PipelineConfig, CONFIG_ENV};
use neural_prior::dataset::synthetic::{make_synthetic_scene, SceneSpec};
use neural_prior::dataset::write_manifest;
use neural_prior::pipeline::{Pipeline, RasterMode};
use neural_prior::{selfcheck, Error, Vec3};

/// Static environment priors from posed camera imagery.
///
/// Stages run in order: partition, train, extract, then query or
/// rasterize. Each reads the artifacts named in the config's [paths]
/// table. Exit codes: 0 success, 1 usage or config error, 2 data error,
/// 3 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "neural-prior", version, about, long_about)]
struct Cli {
    /// Pipeline config (TOML). Relative paths inside it resolve against its
    /// directory.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 gives deterministic mode.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log per-step details.
    #[arg(short, long, global = true, conflicts_with = "quiet")]
    verbose: bool,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Write a synthetic scene: `manifest.json`, its frames and a
    /// `pipeline.toml` pointing at them.
    Synth(SynthArgs),
    /// Cluster camera positions into tiles and sub-field centroids.
    Partition,
    /// Train tile fields; writes checkpoints and metrics.csv per tile.
    Train(TrainArgs),
    /// Render one manifest frame with its tile's trained field.
    Render(RenderArgs),
    /// March every tile and write per-tile and merged voxel priors.
    Extract,
    /// Print prior cells inside a yawed box as JSON lines (ego frame).
    Query(QueryArgs),
    /// Rasterize the prior around an ego pose into a feature-map file.
    Rasterize(RasterizeArgs),
    /// Run the gradient and oracle suites.
    Selfcheck,
    /// Time the hot kernels and print CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scene {
    Boxes,
    Plane,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "boxes")]
    scene: Scene,
    #[arg(long, default_value_t = 96)]
    width: u32,
    #[arg(long, default_value_t = 96)]
    height: u32,
    /// Feature dimension.
    #[arg(long, default_value_t = 8)]
    dim: u32,
    /// Camera count for the plane scene.
    #[arg(long, default_value_t = 8)]
    cameras: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Tiles to train (repeatable); all when omitted.
    #[arg(long)]
    tile: Vec<usize>,
    /// Overrides train.iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Manifest frame index.
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// World-frame box center `x,y,z`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    center: Vec3,
    /// Box half extents `x,y,z`.
    #[arg(long, value_parser = parse_vec3)]
    half_extents: Vec3,
    /// Heading in radians about +z.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
}

#[derive(Args, Debug)]
struct RasterizeArgs {
    /// World-frame ego position `x,y,z`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    position: Vec3,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    /// Write a 3D voxel grid instead of a BEV grid.
    #[arg(long)]
    voxels: bool,
    /// Output file; defaults to `bev.feat` / `voxels.feat` next to the prior.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Kernels to run (repeatable): hash_encode, composite,
    /// composite_parallel, voxel_scatter. All when omitted.
    #[arg(long)]
    kernel: Vec<String>,
    /// Repetitions per kernel (at least 10).
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Input size multiplier.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {s:?}"));
    }
    let mut v = [0.0f64; 3];
    for (o, p) in v.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
        if !o.is_finite() {
            return Err(format!("{p:?} is not finite"));
        }
    }
    Ok(Vec3::from(v))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidArgument(_) => "usage",
        Error::Numerical(_) => "numerical",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        _ => "data",
    }
}

fn load_config(cli: &Cli) -> neural_prior::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::preset(&cli.preset)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn synth(args: &SynthArgs) -> neural_prior::Result<()> {
    let spec = match args.scene {
        Scene::Boxes => SceneSpec::textured_boxes(args.width, args.height, args.dim),
        Scene::Plane => SceneSpec::opaque_plane(args.width, args.height, args.dim, args.cameras),
    };
    let (manifest, _) = make_synthetic_scene(&spec)?;
    let path = write_manifest(&manifest, &args.out, "manifest.json")?;
    let mut cfg = PipelineConfig::preset("desk")?;
    cfg.paths.manifest = "manifest.json".into();
    cfg.paths.plan = "out/plan.json".into();
    cfg.paths.checkpoints = "out/checkpoints".into();
    cfg.paths.priors = "out/priors".into();
    cfg.field.bounds = Some(spec.bounds);
    let cfg_path = args.out.join("pipeline.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|source| Error::Io {
        path: cfg_path.clone(),
        source,
    })?;
    println!("{}", path.display());
    println!("{}", cfg_path.display());
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> neural_prior::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> neural_prior::Result<ExitCode> {
    match &cli.command {
        Command::Config => print!("{}", load_config(cli)?.to_toml()),
        Command::Synth(a) => synth(a)?,
        Command::Partition => {
            let p = Pipeline::new(load_config(cli)?)?;
            let plan = p.partition()?;
            log::info!("{} tiles written to {}", plan.tile_centroids.len(), p.plan_path().display());
        }
        Command::Train(a) => {
            let mut cfg = load_config(cli)?;
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            let p = Pipeline::new(cfg)?;
            for (t, r) in p.train(&a.tile)?.iter().enumerate() {
                if let Some(e) = &r.final_eval {
                    println!("tile {t}: psnr {:.2} dB, feature mse {:.5}", e.psnr, e.feature_mse);
                }
            }
        }
        Command::Render(a) => Pipeline::new(load_config(cli)?)?.render(a.frame, &a.out)?,
        Command::Extract => {
            let p = Pipeline::new(load_config(cli)?)?;
            let grid = p.extract()?;
            println!("{} voxels written to {}", grid.len(), p.prior_path().display());
        }
        Command::Query(a) => {
            let p = Pipeline::new(load_config(cli)?)?;
            for c in p.query(&a.center, &a.half_extents, a.yaw)? {
                let line = serde_json::json!({
                    "position": [c.position.x, c.position.y, c.position.z],
                    "weight": c.weight,
                    "feature": c.feature,
                });
                println!("{line}");
            }
        }
        Command::Rasterize(a) => {
            let p = Pipeline::new(load_config(cli)?)?;
            let (mode, name) = if a.voxels {
                (RasterMode::Voxels, "voxels.feat")
            } else {
                (RasterMode::Bev, "bev.feat")
            };
            let out = a.out.clone().unwrap_or_else(|| p.config.paths.priors.join(name));
            p.rasterize(&a.position, a.yaw, mode, &out)?;
            println!("{}", out.display());
        }
        Command::Selfcheck => {
            let seed = cli.seed.unwrap_or(0);
            let checks = selfcheck::run_all(seed);
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Bench(a) => {
            let mut kernels = Vec::new();
            for name in &a.kernel {
                kernels.push(
                    Kernel::parse(name).ok_or_else(|| Error::InvalidArgument(format!("unknown kernel {name:?}")))?,
                );
            }
            if kernels.is_empty() {
                kernels = Kernel::ALL.to_vec();
            }
            let opts = BenchOptions {
                repetitions: a.repetitions,
                scale: a.scale,
                seed: cli.seed.unwrap_or(0),
            };
            if !(opts.scale > 0.0 && opts.scale.is_finite()) {
                return Err(Error::InvalidArgument("scale must be positive".into()));
            }
            write_or_print(a.out.as_deref(), &to_csv(&run_benchmarks(&kernels, &opts)))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose {
        "debug"
    } else if cli.quiet {
        "warn"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error[usage]: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[usage]: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", kind(&e));
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

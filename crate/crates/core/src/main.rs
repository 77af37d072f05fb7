use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resurface::dataset::{read_dataset, write_sequence, Dataset};
use resurface::geometry::{Intrinsics, Point3};
use resurface::meshing::{read_ply, write_obj, write_ply};
use resurface::pipeline::{bench, bench_csv, build_reference, evaluate, reconstruct, reference_cloud, RunConfig};
use resurface::synth::{make_sequence, AnalyticScene, SynthParams, TrajectoryPlan};
use resurface::evaluation::write_distance_ply;
use resurface::volume::write_snapshot;
use resurface::{Error, Result};

#[derive(Parser)]
#[command(name = "resurface", version, about = "Keyframe-based RGB-D surface reconstruction with on-the-fly correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic desk-room sequence with drift and pose update events.
    Synth(SynthArgs),
    /// Reconstruct a mesh from a dataset directory.
    Reconstruct(ReconstructArgs),
    /// Compare a mesh against a reference mesh.
    Evaluate(EvaluateArgs),
    /// Run a matrix of configurations and write a CSV table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of frames (rounded down to a multiple of the waypoint count).
    #[arg(long, default_value_t = 120)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    waypoints: usize,
    /// Integer downscale factor of the 640x480 camera.
    #[arg(long, default_value_t = 5)]
    downscale: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.3)]
    height: f64,
    /// Depth noise coefficient sigma0 (sigma = sigma0 * z^2).
    #[arg(long, default_value_t = 0.0015)]
    noise: f64,
    /// Maximum per-frame color blur sigma in pixels.
    #[arg(long, default_value_t = 0.0)]
    blur: f64,
    /// Per-frame drift increment: tx,ty,tz,roll,pitch,yaw.
    #[arg(long, value_parser = parse_six, default_value = "0,0,0,0,0,0")]
    drift: [f64; 6],
    /// Correction event `frame:fraction`; repeatable.
    #[arg(long = "correction", value_parser = parse_correction)]
    corrections: Vec<(u64, f64)>,
    #[arg(long, default_value_t = 10)]
    anchor_every: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keyframe strategy: const, dvo, dist, overlap.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    kappa: Option<usize>,
    /// Correction window size.
    #[arg(short, long)]
    m: Option<usize>,
    /// consecutive_window, topk_baseline or off.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    stream_radius: Option<f64>,
    #[arg(long)]
    anchor_every: Option<u64>,
    /// Additional `key=value` settings; repeatable.
    #[arg(long = "set")]
    settings: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        let flags = [
            ("strategy", self.strategy.clone()),
            ("kappa", self.kappa.map(|v| v.to_string())),
            ("m", self.m.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("voxel_size", self.voxel_size.map(|v| v.to_string())),
            ("truncation", self.truncation.map(|v| v.to_string())),
            ("stream_radius", self.stream_radius.map(|v| v.to_string())),
            ("anchor_every", self.anchor_every.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for s in &self.settings {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluate against a reference built from the ground-truth trajectory.
    #[arg(long)]
    evaluate: bool,
    /// Points sampled from the reference mesh.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Also write the final volume snapshot.
    #[arg(long)]
    snapshot: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Reference mesh (PLY as written by this tool).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid cell size of the nearest-neighbor index (m).
    #[arg(long, default_value_t = 0.04)]
    cell: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the model colored by distance to the reference.
    #[arg(long)]
    distance_ply: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Keyframe sizes to run.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 20])]
    kappas: Vec<usize>,
    /// Window sizes to run; ignored with --matched-rate.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize])]
    windows: Vec<usize>,
    /// Sets m = rate / kappa for each kappa.
    #[arg(long)]
    matched_rate: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ["consecutive_window".to_string()])]
    modes: Vec<String>,
    #[arg(long)]
    evaluate: bool,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

fn parse_six(s: &str) -> std::result::Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected 6 comma-separated values".to_string())
}

fn parse_correction(s: &str) -> std::result::Result<(u64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected frame:fraction")?;
    let at = a.trim().parse().map_err(|e| format!("{e}"))?;
    let phi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&phi) {
        return Err("fraction must lie in [0, 1]".into());
    }
    Ok((at, phi))
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a directory", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn reference_for(data: &Dataset, cfg: &RunConfig, samples: usize) -> Result<Vec<Point3>> {
    let mesh = build_reference(data, &cfg.volume, &cfg.fusion)?;
    reference_cloud(&mesh, samples, 0)
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    if a.waypoints < 2 || a.frames < a.waypoints {
        return Err(Error::Config("need at least 2 waypoints and one frame per waypoint".into()));
    }
    let plan = TrajectoryPlan {
        waypoints: TrajectoryPlan::orbit(&Point3::new(0.0, 0.0, 0.5), a.radius, a.height, a.waypoints),
        frames_per_segment: a.frames / a.waypoints,
        drift_rate: a.drift,
        correction_schedule: a.corrections.clone(),
        anchor_every: a.anchor_every,
    };
    let k = Intrinsics::default_vga().downscaled(a.downscale.max(1));
    let params = SynthParams {
        noise_sigma0: a.noise,
        max_color_blur: a.blur,
        seed: a.seed,
        ..Default::default()
    };
    let seq = make_sequence(&AnalyticScene::desk_room(), &plan, &k, &params)?;
    write_sequence(&seq, &a.out)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn run_reconstruct(a: &ReconstructArgs) -> Result<()> {
    require_dir(&a.dataset)?;
    let cfg = a.config.build()?;
    let data = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let mut rec = reconstruct(&cfg, &data)?;
    if a.evaluate {
        let reference = reference_for(&data, &cfg, a.samples)?;
        rec.stats.metrics = Some(evaluate(&rec.mesh, &reference, 4.0 * cfg.volume.voxel_size)?);
    }
    write_ply(&rec.mesh, &a.out.join("mesh.ply"))?;
    write_obj(&rec.mesh, &a.out.join("mesh.obj"))?;
    write_text(&a.out.join("stats.csv"), &rec.stats.to_csv())?;
    let summary = rec.stats.summary_json();
    write_text(&a.out.join("metrics.json"), &format!("{summary:#}\n"))?;
    if a.snapshot {
        write_snapshot(&rec.store, &a.out.join("volume.sdfv"))?;
    }
    println!("{summary:#}");
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = read_ply(&a.mesh)?;
    let reference_mesh = read_ply(&a.reference)?;
    let reference = reference_cloud(&reference_mesh, a.samples, a.seed)?;
    let m = evaluate(&model, &reference, a.cell)?;
    let json = serde_json::to_string_pretty(&m).expect("metrics serialize");
    if let Some(out) = &a.out {
        write_text(out, &format!("{json}\n"))?;
    }
    if let Some(p) = &a.distance_ply {
        write_distance_ply(&model, &reference, a.cell, p)?;
    }
    println!("{json}");
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    require_dir(&a.dataset)?;
    let base = a.config.build()?;
    let mut configs = Vec::new();
    for &kappa in &a.kappas {
        let windows = match a.matched_rate {
            Some(rate) => vec![(rate / kappa.max(1)).max(1)],
            None => a.windows.clone(),
        };
        for &m in &windows {
            for mode in &a.modes {
                let mut c = base.clone();
                c.set("kappa", &kappa.to_string())?;
                c.set("m", &m.to_string())?;
                c.set("mode", mode)?;
                c.validate()?;
                configs.push(c);
            }
        }
    }
    if configs.len() < 2 {
        return Err(Error::Config("bench needs at least two configurations".into()));
    }
    let data = read_dataset(&a.dataset)?;
    let reference = if a.evaluate {
        Some(reference_for(&data, &base, a.samples)?)
    } else {
        None
    };
    let rows = bench(&configs, &data, reference.as_deref())?;
    let csv = bench_csv(&rows);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

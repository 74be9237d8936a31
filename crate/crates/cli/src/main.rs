use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fusiondrive::bev::{rasterize_with, PointCloud, RasterConfig};
use fusiondrive::checkpoint;
use fusiondrive::config::RunConfig;
use fusiondrive::gradsuite;
use fusiondrive::model::DrivingModel;
use fusiondrive::sim::{
    collect_dataset, collect_frames, evaluate_benchmark, route_set, training_routes, BenchmarkReport, Dataset, Expert,
};
use fusiondrive::train::{train, ModelPolicy};

#[derive(Parser)]
#[command(name = "fusiondrive", version, about = "Sensor-fusion driving agent: data collection, training, closed-loop evaluation")]
struct Cli {
    /// `key = value` file overriding the defaults (see `config` subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the expert on training routes and record one frame per tick.
    Collect {
        /// Number of training routes; when omitted, `collect.frames` frames are gathered.
        #[arg(long)]
        routes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a collected dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Closed-loop evaluation on the benchmark routes.
    Eval {
        /// Checkpoint to drive with; the expert drives when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Route count; the first four are the fixed fixtures.
        #[arg(long, default_value_t = 4)]
        routes: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Text report path; the CSV table goes next to it with a `.csv` extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Rasterize a binary point cloud into a 256×256 count grid.
    Rasterize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only points with `z_min <= z < z_max`.
        #[arg(long, num_args = 2, value_names = ["Z_MIN", "Z_MAX"], allow_negative_numbers = true)]
        z_clip: Option<Vec<f64>>,
    },
    /// Print the effective configuration as `key = value` lines.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn collect(cfg: &RunConfig, routes: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let t = Instant::now();
    let data = match routes {
        Some(n) => collect_dataset(&training_routes(n, seed)?, seed, &cfg.harness, &cfg.collect)?,
        None => collect_frames(cfg.frames, seed, &cfg.harness, &cfg.collect)?,
    };
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("{} frames -> {} ({:.1?})", data.len(), out.display(), t.elapsed());
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, data: &Path, epochs: Option<usize>, ckpt: &Path) -> Result<()> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let data = Dataset::load(data).with_context(|| format!("reading {}", data.display()))?;
    let mut model = DrivingModel::new(cfg.model.clone())?;
    let t = Instant::now();
    let report = train(&mut model, &data, &cfg.train, &cfg.saliency_train, &cfg.loss, |e, l| {
        println!(
            "epoch {:>3}  loss {:.4}  wp {:.4}  ht {:.4}  tf {:.4}  ({:.0?})",
            e + 1,
            l.total,
            l.waypoint,
            l.heatmap,
            l.traffic,
            t.elapsed()
        );
    })?;
    if let Some(l) = report.saliency_loss.last() {
        println!("attention model loss {l:.4}");
    }
    checkpoint::save(ckpt, &model).with_context(|| format!("writing {}", ckpt.display()))?;
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn write_report(report: &BenchmarkReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_text())?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, report.to_csv())?;
    println!("report -> {}, {}", path.display(), csv.display());
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: Option<&Path>, routes: usize, repeats: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if routes == 0 || repeats == 0 {
        bail!("need at least one route and one repeat");
    }
    let routes = route_set(routes, seed)?;
    let h = &cfg.harness;
    let report = match ckpt {
        Some(p) => {
            let model = checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            evaluate_benchmark(
                || {
                    let mut policy = ModelPolicy::new(&model, h.controller.clone());
                    policy.threshold = cfg.detection_threshold;
                    policy
                },
                &routes,
                repeats,
                seed,
                h,
            )
        }
        None => evaluate_benchmark(|| Expert::new(h.expert.clone(), h.controller.clone(), h.vehicle.clone()), &routes, repeats, seed, h),
    };
    print!("{}", report.to_text());
    if let Some(p) = out {
        write_report(&report, p)?;
    }
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let t = Instant::now();
    let cases = gradsuite::run(seeds)?;
    let mut ok = true;
    for c in &cases {
        println!("{:<4} {:<24} {:.3e}", if c.passed() { "ok" } else { "FAIL" }, c.name, c.worst);
        ok &= c.passed();
    }
    println!(
        "{} cases x {seeds} seeds, tolerance {:.0e}, {:.1?}",
        cases.len(),
        gradsuite::TOLERANCE,
        t.elapsed()
    );
    Ok(ok)
}

fn rasterize_cmd(input: &Path, out: &Path, z_clip: Option<Vec<f64>>) -> Result<()> {
    let cloud = PointCloud::read_from(&mut BufReader::new(
        File::open(input).with_context(|| format!("reading {}", input.display()))?,
    ))?;
    let cfg = RasterConfig {
        z_clip: z_clip.map(|v| (v[0], v[1])),
        ..Default::default()
    };
    let grid = rasterize_with(&cloud, &cfg);
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("writing {}", out.display()))?);
    grid.write_to(&mut w)?;
    w.flush()?;
    println!("{} points: {} binned, {} dropped", cloud.len(), grid.total(), grid.dropped());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Collect { routes, seed, out } => collect(&cfg, routes, seed, &out)?,
        Command::Train { data, epochs, ckpt } => train_cmd(cfg, &data, epochs, &ckpt)?,
        Command::Eval {
            ckpt,
            routes,
            repeats,
            seed,
            report,
        } => eval(&cfg, ckpt.as_deref(), routes, repeats, seed, report.as_deref())?,
        Command::Gradcheck { seeds } => return gradcheck(seeds),
        Command::Rasterize { input, out, z_clip } => rasterize_cmd(&input, &out, z_clip)?,
        Command::Config => print!("{}", cfg.to_kv()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

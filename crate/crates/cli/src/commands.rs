//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lio_core::config::{ExtrinsicConfig, PipelineConfig};
use lio_core::evaluation::{evaluate, EvalError, Trajectory};
use lio_core::io::{read_trajectory, write_trajectory, IoError, Manifest, SequenceReader, SequenceWriter};
use lio_core::map::GlobalMap;
use lio_core::pipeline::{Pipeline, PipelineError};
use lio_core::simulator::scene::SceneSpec;
use lio_core::simulator::{AnalyticTrajectory, SimSettings, Simulation};
use thiserror::Error;

use crate::{EvalArgs, RunArgs, SimArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no scans in sequence {}", .0.display())]
    NoScans(PathBuf),
    #[error("estimator diverged: {0}")]
    Diverged(PipelineError),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("thread pool: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Usage(_) => 2,
            CliError::Io(IoError::Parse { .. }) => 2,
            CliError::Io(IoError::Missing(_)) => 3,
            CliError::Diverged(_) => 4,
            CliError::NoScans(_) => 5,
            CliError::Eval(EvalError::NoOverlap { .. }) => 6,
            CliError::Pipeline(PipelineError::UnorderedImu { .. }) => 2,
            _ => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Diverged { .. } => CliError::Diverged(e),
            e => CliError::Pipeline(e),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing(path.to_path_buf()).into()
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source: e,
            }
            .into()
        }
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        IoError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn parse_error(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |message| CliError::Parse {
        path: path.to_path_buf(),
        message,
    }
}

fn thread_pool(requested: Option<usize>, deterministic: bool) -> Result<rayon::ThreadPool, CliError> {
    let threads = match (requested, deterministic) {
        (Some(0), _) => return Err(CliError::Usage("--threads must be at least 1".into())),
        (Some(n), true) if n != 1 => {
            return Err(CliError::Usage("--deterministic runs single-threaded; drop --threads or pass 1".into()))
        }
        (_, true) => 1,
        (Some(n), false) => n,
        (None, false) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let reader = SequenceReader::open(&args.sequence)?;
    reader.check_files()?;
    if reader.manifest.scan_count == 0 {
        return Err(CliError::NoScans(args.sequence.clone()));
    }
    let mut config = match &args.config {
        Some(p) => PipelineConfig::from_toml(&read_text(p)?).map_err(|e| parse_error(p)(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let sensor = *config.sensor.get_or_insert(reader.manifest.sensor);
    let extrinsic = match &config.extrinsic {
        Some(e) => e.transform().map_err(|e| CliError::Usage(e.to_string()))?,
        None => {
            config.extrinsic = Some(ExtrinsicConfig::from_transform(&reader.manifest.extrinsic));
            reader.manifest.extrinsic
        }
    };
    if args.deterministic {
        config.estimator.time_budget = 0.0;
    }
    let diameter = reader
        .manifest
        .scene_diameter
        .unwrap_or(2.0 * sensor.max_range as f64);
    let bound = config.divergence_factor * diameter;
    let pool = thread_pool(args.threads, args.deterministic)?;

    fs::create_dir_all(&args.output).map_err(|e| IoError::Io {
        path: args.output.clone(),
        source: e,
    })?;
    let echo = format!(
        "# threads = {}\n# divergence_bound = {bound}\n{}",
        pool.current_num_threads(),
        config.to_toml()
    );
    write_text(&args.output.join("config_echo.toml"), &echo)?;

    let imu = reader.imu()?;
    let mut pipeline = Pipeline::new(config, sensor, extrinsic).with_divergence_bound(bound);
    if args.deterministic {
        pipeline = pipeline.deterministic();
    }
    pipeline.push_imu(&imu)?;

    let mut trajectory = Trajectory::default();
    let mut diagnostics = String::new();
    let outcome = pool.install(|| -> Result<(), CliError> {
        for k in 0..reader.manifest.scan_count {
            let scan = reader.scan(k)?;
            let report = pipeline.process_scan(&scan)?;
            diagnostics.push_str(&report.to_line(!args.deterministic));
            diagnostics.push('\n');
            if let Some(pose) = report.pose {
                trajectory.push(report.stamp, pose);
            }
        }
        Ok(())
    });

    write_trajectory(&args.output.join("trajectory.txt"), &trajectory)?;
    write_text(&args.output.join("diagnostics.txt"), &diagnostics)?;
    if args.dump_map {
        write_text(&args.output.join("map.txt"), &map_dump(pipeline.map()))?;
    }
    if args.dump_primitives {
        let summary = primitive_summary(pipeline.map());
        write_text(&args.output.join("primitives.txt"), &summary)?;
        print!("{summary}");
    }
    outcome?;
    println!(
        "scans={} poses={} map_points={}",
        reader.manifest.scan_count,
        trajectory.len(),
        pipeline.map().len()
    );
    Ok(())
}

fn map_dump(map: &GlobalMap) -> String {
    let mut out = String::with_capacity(map.len() * 40);
    for p in map.points() {
        let label = p.ellipsoid.map_or("none", |e| e.saliency.dominant().label());
        let _ = writeln!(out, "{:.6} {:.6} {:.6} {label}", p.position.x, p.position.y, p.position.z);
    }
    out
}

fn primitive_summary(map: &GlobalMap) -> String {
    let c = map.primitive_counts();
    format!(
        "plane={} line={} ball={} none={}\nplane_pct={:.3} line_pct={:.3} ball_pct={:.3}\n",
        c.plane,
        c.line,
        c.ball,
        c.none,
        c.plane_pct(),
        c.line_pct(),
        c.ball_pct()
    )
}

pub fn sim(args: &SimArgs) -> Result<(), CliError> {
    let scene = SceneSpec::from_toml(&read_text(&args.scene)?).map_err(parse_error(&args.scene))?;
    let trajectory =
        AnalyticTrajectory::from_toml(&read_text(&args.trajectory)?).map_err(parse_error(&args.trajectory))?;
    let mut settings = match &args.config {
        Some(p) => SimSettings::from_toml(&read_text(p)?).map_err(parse_error(p))?,
        None => SimSettings::default(),
    };
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    let pool = thread_pool(args.threads, false)?;
    let sim = Simulation::from_settings(scene.build(), trajectory, &settings);
    if sim.scan_count() == 0 {
        return Err(CliError::Usage(format!(
            "duration {} s is shorter than one scan period",
            settings.duration
        )));
    }

    let outside = sim.out_of_bounds();
    if let Some(first) = outside.first() {
        eprintln!(
            "warning: the sensor leaves the scene bounds at {} of {} scans (first at t = {first:.3} s); \
             scans there may be empty",
            outside.len(),
            sim.scan_count()
        );
    }

    let mut manifest = Manifest::new(settings.sensor, 0);
    manifest.extrinsic = sim.imu_from_lidar;
    let diameter = sim.scene.diameter();
    manifest.scene_diameter = (diameter > 0.0).then_some(diameter);
    let mut writer = SequenceWriter::create(&args.output, manifest)?;
    writer.write_imu(&sim.imu_samples())?;
    writer.write_ground_truth(&sim.ground_truth())?;
    let mut empty = 0;
    pool.install(|| -> Result<(), CliError> {
        for k in 0..sim.scan_count() {
            let scan = sim.scan(k);
            if scan.points.is_empty() {
                empty += 1;
            }
            writer.push_scan(&scan)?;
        }
        Ok(())
    })?;
    let manifest = writer.finish()?;
    println!("scans={} empty_scans={empty}", manifest.scan_count);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    if !(args.max_dt > 0.0 && args.max_dt.is_finite()) {
        return Err(CliError::Usage(format!("--max-dt must be positive, got {}", args.max_dt)));
    }
    let est = read_trajectory(&args.estimate)?;
    let gt = read_trajectory(&args.ground_truth)?;
    let report = evaluate(&est, &gt, args.max_dt)?;
    println!("ape_rmse_m={:.6}", report.rmse);
    println!("rotation_rmse_rad={:.6}", report.rotation_rmse);
    println!("pairs={}", report.pairs);
    Ok(())
}

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sgpc::decoder::{
    classify, decode, fit_base_gp, predict_surface, variance_threshold, write_surface_csv, DecoderConfig,
    ThresholdTable,
};
use sgpc::encoder::{encode, CompressedObservation, EncoderConfig};
use sgpc::eval::{
    bench, calibrate, calibration_suite, compression_ratio, default_sweep, occupancy_confusion, rmsd, BenchConfig,
    CALIBRATION_M,
};
use sgpc::geometry::{make_query_grid, read_cloud, write_cloud, Pose, SensorModel};
use sgpc::synth::{generate_scan, SceneConfig};
use sgpc::transport::{BaseServer, Sender};
use sgpc::wire;

#[derive(Parser)]
#[command(name = "sgpc", version, about = "Sparse-GP LiDAR scan codec")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for synthesis noise and the encoder's random choices.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Inducing points per scan.
    #[arg(long, global = true, default_value_t = 500)]
    m: usize,
    /// Weight of the mean variance in the occupancy threshold.
    #[arg(long, global = true)]
    km: Option<f64>,
    /// Weight of the variance spread in the occupancy threshold.
    #[arg(long, global = true)]
    kstd: Option<f64>,
    /// Query grid subdivision when decoding.
    #[arg(long, global = true, default_value_t = 1)]
    upsample: usize,
    /// Sensor model: `desk` (1 degree) or `vlp16` (0.1 degree).
    #[arg(long, global = true, default_value = "desk")]
    sensor: String,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a body-frame pointcloud into an observation file.
    Encode {
        cloud: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Sensor pose as x,y,z,roll,pitch,yaw.
        #[arg(long)]
        pose: Option<String>,
    },
    /// Reconstruct a global-frame pointcloud from an observation file.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the predicted mean and variance per grid cell.
        #[arg(long)]
        surface: Option<PathBuf>,
    },
    /// Synthesize, encode, decode and score one scene.
    Roundtrip {
        /// Built-in scene name or scene file.
        #[arg(default_value = "tunnel")]
        scene: String,
        /// Writes the reconstruction here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a benchmark sweep and print or write its CSV.
    Bench {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Exit nonzero when the ratio or RMSD trend checks fail.
        #[arg(long)]
        check: bool,
        /// Add encode and decode wall-clock columns.
        #[arg(long)]
        timings: bool,
    },
    /// Fit threshold weights per inducing count on the calibration scenes.
    Calibrate {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Receive observations until interrupted.
    Serve {
        endpoint: String,
        /// Link statistics CSV written on exit.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Decode each observation into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Stop after this many frames.
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Encode clouds and stream them to a receiver.
    Send {
        endpoint: String,
        #[arg(required = true)]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        pose: Option<String>,
        /// Frames per second; unpaced when absent.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Write a synthetic body-frame scan of a scene.
    Synth {
        scene: String,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    match &cli.command {
        Command::Encode { cloud, output, pose } => {
            let cloud = read_cloud(cloud).with_context(|| format!("reading {}", cloud.display()))?;
            let obs = encode(&cloud, &parse_pose(pose.as_deref())?, &encoder_config(common)?)?;
            let bytes = wire::serialize(&obs);
            fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
            println!(
                "{} points -> {} bytes (ratio {:.2})",
                cloud.len(),
                bytes.len(),
                compression_ratio(&cloud, bytes.len())?
            );
        }
        Command::Decode { input, output, surface } => {
            let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            let obs = wire::deserialize(&bytes)?;
            let cfg = decoder_config(common, obs.len())?;
            let cloud = decode(&obs, &cfg)?;
            write_cloud(output, &cloud).with_context(|| format!("writing {}", output.display()))?;
            if let Some(path) = surface {
                let pred = predict_surface(&fit_base_gp(&obs)?, &make_query_grid(&cfg.sensor, cfg.upsample)?)?;
                let mut out = BufWriter::new(fs::File::create(path)?);
                write_surface_csv(&mut out, &pred, None)?;
                out.flush()?;
            }
            println!("{} inducing points -> {} points", obs.len(), cloud.len());
        }
        Command::Roundtrip { scene, output } => roundtrip(common, scene, output.as_deref())?,
        Command::Bench {
            config,
            output,
            check,
            timings,
        } => {
            let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
            let base = config.parent().unwrap_or(Path::new("."));
            let mut cfg = BenchConfig::parse(&text, base)?;
            cfg.timings |= *timings;
            if let Some(t) = thresholds_override(common)? {
                cfg.thresholds = t;
            }
            let report = bench(&cfg)?;
            match output {
                Some(path) => {
                    let mut out = BufWriter::new(fs::File::create(path)?);
                    report.write_csv(&mut out)?;
                    out.flush()?;
                }
                None => print!("{}", report.to_csv()),
            }
            if *check {
                let problems = report.check();
                for p in &problems {
                    eprintln!("check failed: {p}");
                }
                if !problems.is_empty() {
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Calibrate { output } => {
            let run = calibrate(&calibration_suite(), &CALIBRATION_M, &default_sweep(), common.seed)?;
            for (m, f1) in &run.mean_f1 {
                let (k_m, k_std) = run.table.weights_for(*m);
                eprintln!("m={m}: k_m={k_m} k_std={k_std} mean F1 {f1:.4}");
            }
            match output {
                Some(path) => fs::write(path, run.table.to_text())?,
                None => print!("{}", run.table.to_text()),
            }
        }
        Command::Serve {
            endpoint,
            stats,
            out_dir,
            frames,
        } => serve(common, endpoint, stats.as_deref(), out_dir.as_deref(), *frames)?,
        Command::Send {
            endpoint,
            clouds,
            pose,
            rate,
        } => {
            let pose = parse_pose(pose.as_deref())?;
            let cfg = encoder_config(common)?;
            let period = match rate {
                Some(hz) if *hz > 0.0 => Some(Duration::from_secs_f64(1.0 / hz)),
                Some(hz) => bail!("rate must be positive, got {hz}"),
                None => None,
            };
            let mut sender = Sender::connect(endpoint)?;
            let begin = Instant::now();
            for (i, path) in clouds.iter().enumerate() {
                let cloud = read_cloud(path).with_context(|| format!("reading {}", path.display()))?;
                let obs = encode(&cloud, &pose, &cfg)?;
                if let Some(period) = period {
                    let due = begin + period * i as u32;
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                }
                sender.send(&obs)?;
            }
            let stats = sender.stats();
            println!("sent {} frames, {} bytes", stats.frames(), stats.bytes());
        }
        Command::Synth { scene, output } => {
            let spec = load_scene(scene, common)?;
            let scan = generate_scan(&spec.scene, &spec.pose, &spec.sensor, common.seed)?;
            write_cloud(output, &scan.cloud).with_context(|| format!("writing {}", output.display()))?;
            let p = spec.pose.to_array();
            println!(
                "{} points, pose {},{},{},{},{},{}",
                scan.cloud.len(),
                p[0],
                p[1],
                p[2],
                p[3],
                p[4],
                p[5]
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sensor(common: &Common) -> Result<SensorModel> {
    match common.sensor.as_str() {
        "desk" => Ok(SensorModel::desk()),
        "vlp16" => Ok(SensorModel::vlp16()),
        other => bail!("unknown sensor {other:?}; expected desk or vlp16"),
    }
}

fn encoder_config(common: &Common) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        rng_seed: common.seed,
        ..EncoderConfig::for_sensor(&sensor(common)?, common.m)
    })
}

fn thresholds_override(common: &Common) -> Result<Option<ThresholdTable>> {
    if common.km.is_none() && common.kstd.is_none() {
        return Ok(None);
    }
    let fallback = DecoderConfig::default();
    Ok(Some(ThresholdTable::uniform(
        common.km.unwrap_or(fallback.k_m),
        common.kstd.unwrap_or(fallback.k_std),
    )?))
}

fn decoder_config(common: &Common, m: usize) -> Result<DecoderConfig> {
    let table = thresholds_override(common)?.unwrap_or_else(ThresholdTable::calibrated);
    let (k_m, k_std) = table.weights_for(m);
    let cfg = DecoderConfig {
        k_m,
        k_std,
        upsample: common.upsample,
        sensor: sensor(common)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_pose(text: Option<&str>) -> Result<Pose> {
    let Some(text) = text else {
        return Ok(Pose::identity());
    };
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("pose {text:?}"))?;
    let Ok(values) = <[f64; 6]>::try_from(values) else {
        bail!("pose needs six values x,y,z,roll,pitch,yaw");
    };
    Ok(Pose::from_array(values))
}

fn load_scene(name: &str, common: &Common) -> Result<SceneConfig> {
    if let Some(mut spec) = SceneConfig::builtin(name) {
        spec.sensor = sensor(common)?;
        return Ok(spec);
    }
    let text = fs::read_to_string(name).with_context(|| format!("scene {name:?} is neither built in nor a readable file"))?;
    Ok(SceneConfig::parse(&text)?)
}

fn roundtrip(common: &Common, scene: &str, output: Option<&Path>) -> Result<()> {
    let spec = load_scene(scene, common)?;
    let truth = generate_scan(&spec.scene, &spec.pose, &spec.sensor, common.seed)?;
    let enc = EncoderConfig {
        rng_seed: common.seed,
        ..EncoderConfig::for_sensor(&spec.sensor, common.m)
    };
    let obs = encode(&truth.cloud, &truth.pose, &enc)?;
    let bytes = wire::serialize(&obs);
    let received = wire::deserialize(&bytes)?;
    let mut dec = decoder_config(common, received.len())?;
    dec.sensor = spec.sensor.clone();
    let grid = make_query_grid(&spec.sensor, 1)?;
    let pred = predict_surface(&fit_base_gp(&received)?, &grid)?;
    let (mean, std) = rmsd(&truth, &pred, received.r_oc)?;
    let occupied = classify(&pred, variance_threshold(&pred, dec.k_m, dec.k_std)?);
    let confusion = occupancy_confusion(&truth, &occupied)?;
    println!("points {}", truth.cloud.len());
    println!("inducing {}", received.len());
    println!("bytes {}", bytes.len());
    println!("ratio {:.2}", compression_ratio(&truth.cloud, bytes.len())?);
    println!("rmsd {mean:.4} +- {std:.4}");
    println!("precision {:.4}", confusion.precision);
    println!("recall {:.4}", confusion.recall);
    if let Some(path) = output {
        let cloud = decode(&received, &dec)?;
        write_cloud(path, &cloud).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn serve(
    common: &Common,
    endpoint: &str,
    stats_path: Option<&Path>,
    out_dir: Option<&Path>,
    frames: Option<u64>,
) -> Result<()> {
    let server = BaseServer::bind(endpoint)?;
    eprintln!("listening on {}", server.local_addr()?);
    let shutdown = Arc::new(AtomicBool::new(false));
    {
        let flag = Arc::clone(&shutdown);
        ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)).context("installing interrupt handler")?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let stop = Arc::clone(&shutdown);
    let mut received = 0u64;
    let mut failure: Option<anyhow::Error> = None;
    let mut sink = |obs: CompressedObservation| {
        received += 1;
        log::info!("frame {received}: {} inducing points", obs.len());
        if let Some(dir) = out_dir {
            let path = dir.join(format!("frame_{received:05}.xyz"));
            let written = decoder_config(common, obs.len())
                .and_then(|cfg| Ok(decode(&obs, &cfg)?))
                .and_then(|cloud| Ok(write_cloud(&path, &cloud)?));
            if let Err(e) = written {
                failure.get_or_insert(e);
                stop.store(true, Ordering::Relaxed);
            }
        }
        if frames.is_some_and(|n| received >= n) {
            stop.store(true, Ordering::Relaxed);
        }
    };
    let stats = server.run(&shutdown, &mut sink)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(path) = stats_path {
        let mut out = BufWriter::new(fs::File::create(path)?);
        stats.write_csv(&mut out)?;
        out.flush()?;
    }
    println!(
        "received {} frames, {} bytes, {} failures",
        stats.frames(),
        stats.bytes(),
        stats.decode_failures()
    );
    Ok(())
}

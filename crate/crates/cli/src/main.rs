//! `rfslam`: simulate, track, learn, evaluate and benchmark.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and numerical failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rfslam::config::RunConfig;
use rfslam::filter::{run_filter, StateEstimates};
use rfslam::io::{self, Checkpoint, MeasurementHeader};
use rfslam::learning::{learn, LearnData};
use rfslam::metrics;
use rfslam::scenario::{synth_measurements, synth_truth, MeasurementFrame};
use rfslam::signal::ResponseModel;

#[derive(Parser)]
#[command(name = "rfslam", version, about = "Direct RF SLAM with learned multipath maps")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a trajectory and measurement frames from the configured scenario.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (measurements.bin, truth.bin, imu.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Track the MT through a measurement file.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Map checkpoint; without one the tracker is LOS-only.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (track.csv, snapshots.bin).
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the neural map (and optionally the calibration) by EM.
    Learn {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Start from this checkpoint instead of a fresh map.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground-truth file; required with --supervised.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        segment_k0: Option<usize>,
        #[arg(long)]
        em_iters: Option<usize>,
        #[arg(long)]
        adam_steps: Option<usize>,
        #[arg(long)]
        supervised: bool,
        #[arg(long)]
        learn_chi: bool,
        /// Particles kept per step for the M-step.
        #[arg(long)]
        subset_p0: Option<usize>,
        #[arg(long)]
        mmse_points: bool,
        /// Output directory (checkpoint.bin, training_log.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a track (and optionally a map) against ground truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the low-rank likelihood against the dense reference.
    Bench {
        /// Measurement sizes M (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
        sizes: Vec<usize>,
        /// Covariance ranks R (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = [8usize])]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
        /// Dense evaluations timed per row.
        #[arg(long, default_value_t = 16)]
        dense_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    measurements: PathBuf,
    /// IMU orientation readings written by `simulate`.
    #[arg(long)]
    imu: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<rfslam::Error> for Failure {
    fn from(e: rfslam::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        rfslam::parallel::set_threads(n);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Simulate { run, out } => simulate(&run, &out),
        Command::Infer { run, data, checkpoint, out } => infer(&run, &data, checkpoint.as_deref(), &out),
        Command::Learn {
            run,
            data,
            checkpoint,
            truth,
            segment_k0,
            em_iters,
            adam_steps,
            supervised,
            learn_chi,
            subset_p0,
            mmse_points,
            out,
        } => {
            let mut cfg = load_config(&run)?;
            if let Some(k0) = segment_k0 {
                cfg.learn.segment = Some(k0);
            }
            if let Some(t) = em_iters {
                cfg.learn.em_iterations = t;
            }
            if let Some(s) = adam_steps {
                cfg.learn.adam_steps = s;
            }
            if let Some(p0) = subset_p0 {
                cfg.filter.subset = p0;
            }
            cfg.learn.supervised |= supervised;
            cfg.learn.learn_chi |= learn_chi;
            cfg.learn.use_mmse_points |= mmse_points;
            cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
            if cfg.learn.supervised && truth.is_none() {
                return Err(usage("--supervised needs --truth"));
            }
            learn_cmd(&cfg, &data, checkpoint.as_deref(), truth.as_deref(), &out)
        }
        Command::Eval { truth, track, checkpoint, out } => eval(&truth, &track, checkpoint.as_deref(), &out),
        Command::Bench { sizes, ranks, batch, dense_samples, seed, out } => bench(&sizes, &ranks, batch, dense_samples, seed, &out),
    }
}

fn load_config(run: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&run.config).map_err(|e| Failure::Usage(anyhow!("{}: {e}", run.config.display())))?;
    if let Some(seed) = run.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn simulate(run: &RunArgs, out: &Path) -> CliResult<()> {
    let cfg = load_config(run)?;
    let model = cfg.response_model()?;
    let truth = synth_truth(&cfg.scenario)?;
    let frames = synth_measurements(&cfg.scenario, &truth, &model)?;
    let header = MeasurementHeader {
        bs_count: cfg.scenario.bs_count(),
        steps: frames.len(),
        freq_count: model.signal.freq_count(),
        antenna_count: model.signal.antenna_count(),
    };
    create_dir(out)?;
    io::write_measurements(&out.join("measurements.bin"), &header, &frames)?;
    io::write_truth(&out.join("truth.bin"), &truth, &cfg.scenario.bs_positions)?;
    write_text(&out.join("imu.csv"), &imu_csv(&truth.imu_orientation))?;
    println!("J={} K={} M={}", header.bs_count, header.steps, model.len());
    Ok(())
}

fn imu_csv(z: &[f64]) -> String {
    let mut s = String::from("k,z_o\n");
    for (k, v) in z.iter().enumerate() {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn read_imu(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || anyhow!("{}:{}: expected `k,z_o`", path.display(), i + 1);
        let (k, v) = line.split_once(',').ok_or_else(bad)?;
        let (k, v): (usize, f64) = (k.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?);
        if k != out.len() {
            return Err(Failure::Runtime(bad()));
        }
        out.push(v);
    }
    Ok(out)
}

/// Measurement frames checked against the config's signal layout.
fn load_frames(cfg: &RunConfig, data: &DataArgs) -> CliResult<(ResponseModel, Vec<MeasurementFrame>, Option<Vec<f64>>)> {
    let model = cfg.response_model()?;
    let (header, frames) = io::read_measurements(&data.measurements).with_context(|| format!("reading {}", data.measurements.display()))?;
    if header.bs_count != cfg.scenario.bs_count() || header.freq_count * header.antenna_count != model.len() {
        return Err(usage(format!(
            "{} holds J={} M={} but the config gives J={} M={}",
            data.measurements.display(),
            header.bs_count,
            header.freq_count * header.antenna_count,
            cfg.scenario.bs_count(),
            model.len()
        )));
    }
    let imu = data.imu.as_deref().map(read_imu).transpose()?;
    if let Some(z) = &imu {
        if z.len() != frames.len() + 1 {
            return Err(usage(format!("IMU file has {} rows for K = {}", z.len(), frames.len())));
        }
    }
    Ok((model, frames, imu))
}

fn with_calibration(mut model: ResponseModel, ck: &Checkpoint) -> ResponseModel {
    if let Some(cal) = &ck.calibration {
        model.calibration = cal.clone();
    }
    model
}

fn infer(run: &RunArgs, data: &DataArgs, checkpoint: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = load_config(run)?;
    let (mut model, frames, imu) = load_frames(&cfg, data)?;
    let anchors = &cfg.scenario.bs_positions;
    let features = match checkpoint {
        Some(p) => {
            let ck = io::read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            model = with_calibration(model, &ck);
            ck.map.predict_all(anchors)?
        }
        None => vec![Vec::new(); anchors.len()],
    };
    eprintln!("tracking with D={} over K={}", features.first().map_or(0, |f| f.len()), frames.len());
    let result = run_filter(&frames, anchors, &model, &cfg.models, &features, imu.as_deref(), &cfg.filter)?;
    if result.report.violations > 0 {
        eprintln!("warning: {} invariant violations: {:?}", result.report.violations, result.report.details);
    }
    create_dir(out)?;
    write_text(&out.join("track.csv"), &io::track_csv(&result.estimates))?;
    io::write_snapshots(&out.join("snapshots.bin"), anchors.len(), &result.snapshots)?;
    Ok(())
}

fn learn_cmd(cfg: &RunConfig, data: &DataArgs, checkpoint: Option<&Path>, truth: Option<&Path>, out: &Path) -> CliResult<()> {
    let (mut model, frames, imu) = load_frames(cfg, data)?;
    let (map, adam) = match checkpoint {
        Some(p) => {
            let ck = io::read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            model = with_calibration(model, &ck);
            (ck.map, ck.adam)
        }
        None => (cfg.initial_map()?, None),
    };
    let truth = match truth {
        Some(p) => {
            let (t, _) = io::read_truth(p).with_context(|| format!("reading {}", p.display()))?;
            if t.mt_states.len() != frames.len() + 1 {
                return Err(usage(format!("{} covers K = {} but the measurements have K = {}", p.display(), t.steps(), frames.len())));
            }
            Some(t)
        }
        None => None,
    };
    let data = LearnData {
        frames: &frames,
        anchors: &cfg.scenario.bs_positions,
        imu: imu.as_deref(),
        truth: truth.as_ref().map(|t| t.mt_states.as_slice()),
        scene: cfg.scenario.bounding_box()?,
    };
    let learn_chi = cfg.learn.learn_chi;
    let result = learn(&data, model, &cfg.models, &cfg.filter, &cfg.learn, map)?;
    // an untouched optimizer state is passed through so T = 0 stays a no-op
    let adam = if cfg.learn.em_iterations == 0 { adam } else { Some(result.adam.clone()) };
    let ck = Checkpoint { map: result.map, adam, calibration: learn_chi.then_some(result.model.calibration) };
    create_dir(out)?;
    io::write_checkpoint(&out.join("checkpoint.bin"), &ck)?;
    write_text(&out.join("training_log.csv"), &io::training_log_csv(&result.log))?;
    eprintln!("{} EM iterations, {} log rows", cfg.learn.em_iterations, result.log.len());
    Ok(())
}

fn eval(truth: &Path, track: &Path, checkpoint: Option<&Path>, out: &Path) -> CliResult<()> {
    let (t, bs) = io::read_truth(truth).with_context(|| format!("reading {}", truth.display()))?;
    let text = fs::read_to_string(track).with_context(|| format!("reading {}", track.display()))?;
    let est: Vec<StateEstimates> = io::parse_track_csv(&text).with_context(|| format!("parsing {}", track.display()))?;
    if est.len() != t.mt_states.len() {
        return Err(usage(format!("track has {} rows, truth has {}", est.len(), t.mt_states.len())));
    }
    let learned = match checkpoint {
        Some(p) => Some(io::read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?.map.predict_all(&bs)?),
        None => None,
    };
    let true_anchors: Vec<Vec<[f64; 2]>> = t.virtual_anchors.iter().map(|v| v.iter().map(|f| f.position).collect()).collect();
    let truth_pos: Vec<[f64; 2]> = t.mt_states.iter().map(|s| s.position).collect();
    let est_pos: Vec<[f64; 2]> = est.iter().map(|s| s.mt.position).collect();
    let vis: Vec<Vec<f64>> = est.iter().map(|s| s.visibility.clone()).collect();
    let report = metrics::evaluate(&truth_pos, &est_pos, &t.los_flags, &vis, learned.as_deref().map(|l| (true_anchors.as_slice(), l)))?;
    let json = serde_json::to_string_pretty(&report).context("serializing the report")?;
    write_text(out, &json)?;
    println!("rmse={:.4} median={:.4}", report.position_rmse, report.position_median);
    Ok(())
}

fn bench(sizes: &[usize], ranks: &[usize], batch: usize, dense_samples: usize, seed: u64, out: &Path) -> CliResult<()> {
    let mut rows = Vec::new();
    for &m in sizes {
        for &r in ranks {
            let row = rfslam::bench::bench_case(m, r, batch, dense_samples, seed).map_err(|e| Failure::Usage(e.into()))?;
            eprintln!("M={m} R={r}: woodbury {:.0} ns, dense {:.0} ns, max rel err {:.1e}", row.woodbury_ns, row.dense_ns, row.max_rel_err);
            rows.push(row);
        }
    }
    write_text(out, &rfslam::bench::bench_csv(&rows))
}

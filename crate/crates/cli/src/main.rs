use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use magvio::estimator::{run_sequence, Mode, RunConfig};
use magvio::eval::{ate, final_yaw_error, rpe_yaw, AlignmentMode};
use magvio::io::{self, config, Dataset, KeyValues};
use magvio::mag::{self, allan};
use magvio::{Error, Result};

#[derive(Parser)]
#[command(name = "magvio", version, about = "Visual-inertial-magnetometer odometry toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        /// Simulator config (key = value); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit soft/hard-iron calibration to raw magnetometer samples.
    CalibrateMag {
        /// Raw mag.csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FitMode::Full)]
        fit: FitMode,
        /// Output magcal.cfg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Estimator config (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the mode from the config.
        #[arg(long)]
        mode: Option<String>,
        /// Output trajectory CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory with a reference.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Align::Se3)]
        align: Align,
        /// Comma-separated RPE segment lengths in meters. Defaults to 10%, 30% and 60% of the path.
        #[arg(long, value_delimiter = ',')]
        segments: Vec<f64>,
        /// Maximum timestamp difference when associating poses.
        #[arg(long, default_value_t = 1e-3)]
        max_dt: f64,
        /// Per-segment yaw errors as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Allan deviation of columns of a uniformly sampled CSV.
    Allan {
        #[arg(long)]
        input: PathBuf,
        /// Column to analyse; repeatable. Defaults to every column except `t`.
        #[arg(long)]
        column: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Taus per decade.
        #[arg(long, default_value_t = 10)]
        per_decade: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMode {
    Full,
    #[value(name = "hard_iron")]
    HardIron,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    Se3,
    Sim3,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Simulate { config, out, seed } => simulate(config.as_deref(), &out, seed),
        Command::CalibrateMag { input, fit, out } => calibrate(&input, fit, &out),
        Command::Run { dataset, config, mode, out } => run(&dataset, config.as_deref(), mode.as_deref(), &out),
        Command::Evaluate { est, reference, align, segments, max_dt, out } => evaluate(&est, &reference, align, &segments, max_dt, out.as_deref()),
        Command::Allan { input, column, out, per_decade } => allan_cmd(&input, &column, &out, per_decade),
    }
}

fn load_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => KeyValues::parse("", "<defaults>"),
    }
}

fn simulate(cfg_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut cfg = io::parse_sim_config(load_kv(cfg_path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sim = magvio::sim::simulate(&cfg)?;
    let ds = Dataset::from_simulation(&sim, cfg.camera, Some(cfg.true_calibration()?));
    ds.write(out)?;
    let n_obs: usize = ds.frames.iter().map(|f| f.observations.len()).sum();
    let mut s = String::new();
    writeln!(s, "trajectory = {}", cfg.trajectory.kind.name()).unwrap();
    writeln!(s, "duration_s = {}", cfg.trajectory.duration).unwrap();
    writeln!(s, "path_length_m = {:.3}", sim.groundtruth.path_length()).unwrap();
    writeln!(s, "imu_samples = {}", ds.imu.len()).unwrap();
    writeln!(s, "mag_samples = {}", sim.mag.len()).unwrap();
    writeln!(s, "frames = {}", ds.frames.len()).unwrap();
    writeln!(s, "observations = {n_obs}").unwrap();
    writeln!(s, "landmarks = {}", sim.landmarks.len()).unwrap();
    writeln!(s, "seed = {}", cfg.seed).unwrap();
    Ok(s)
}

fn calibrate(input: &Path, mode: FitMode, out: &Path) -> Result<String> {
    let raw = io::read_mag(input)?;
    let cal = match mode {
        FitMode::Full => mag::fit_ellipsoid(&raw)?,
        FitMode::HardIron => mag::fit_hard_iron(&raw)?,
    };
    io::write_atomic(out, config::magcal_to_string(&cal).as_bytes())?;
    let r = mag::calibration::fit_report(&raw, &cal);
    let mut s = String::new();
    writeln!(s, "fit = {}", if matches!(mode, FitMode::Full) { "full" } else { "hard_iron" }).unwrap();
    writeln!(s, "samples = {}", raw.len()).unwrap();
    writeln!(s, "mean_radius = {:.6}", r.mean_radius).unwrap();
    writeln!(s, "rms_radius_error = {:.6}", r.rms_radius_error).unwrap();
    writeln!(s, "max_radius_error = {:.6}", r.max_radius_error).unwrap();
    writeln!(s, "octants_covered = {}/8", r.octants_covered).unwrap();
    Ok(s)
}

fn run(dataset: &Path, cfg_path: Option<&Path>, mode: Option<&str>, out: &Path) -> Result<String> {
    let mut cfg: RunConfig = io::parse_run_config(load_kv(cfg_path)?)?;
    if let Some(m) = mode {
        cfg.mode = Mode::from_str(m)?;
    }
    if cfg.mode == Mode::VioMag {
        for f in ["mag.csv", "magcal.cfg"] {
            if !dataset.join(f).is_file() {
                return Err(Error::Config(format!("vio_mag mode requires {}", dataset.join(f).display())));
            }
        }
    }
    let ds = Dataset::load(dataset)?;
    let started = Instant::now();
    let result = run_sequence(&ds, &cfg)?;
    io::write_trajectory(out, &result.trajectory)?;
    let st = result.stats;
    // Timing varies between invocations, keep it off stdout.
    eprintln!(
        "timing: total {:.2} s, per window mean {:.2} ms, max {:.2} ms",
        started.elapsed().as_secs_f64(),
        st.mean_frame_seconds * 1e3,
        st.max_frame_seconds * 1e3
    );
    let mut s = String::new();
    writeln!(s, "mode = {}", cfg.mode).unwrap();
    writeln!(s, "frames = {}", st.frames).unwrap();
    writeln!(s, "keyframes = {}", st.keyframes).unwrap();
    writeln!(s, "poses_written = {}", result.trajectory.len()).unwrap();
    writeln!(s, "lm_iterations = {}", st.lm_iterations).unwrap();
    writeln!(s, "landmarks_pruned = {}", st.landmarks_pruned).unwrap();
    writeln!(s, "stationary_bootstrap = {}", st.stationary_bootstrap).unwrap();
    writeln!(s, "final_cost = {:.6e}", st.final_cost).unwrap();
    Ok(s)
}

fn evaluate(est_path: &Path, ref_path: &Path, align: Align, segments: &[f64], max_dt: f64, out: Option<&Path>) -> Result<String> {
    let est = io::read_trajectory(est_path)?;
    let reference = io::read_trajectory(ref_path)?;
    let mode = match align {
        Align::Se3 => AlignmentMode::Se3,
        Align::Sim3 => AlignmentMode::Sim3,
    };
    let a = ate(&est, &reference, mode, max_dt)?;
    let segments: Vec<f64> = if segments.is_empty() {
        let len = reference.path_length();
        [0.1, 0.3, 0.6].iter().map(|f| f * len).filter(|d| *d > 0.0).collect()
    } else {
        segments.to_vec()
    };
    let rpe = if segments.is_empty() { Vec::new() } else { rpe_yaw(&est, &reference, &segments, max_dt)? };
    let mut s = String::new();
    writeln!(s, "rotation_metric = geodesic").unwrap();
    writeln!(s, "alignment = {}", if matches!(align, Align::Se3) { "se3" } else { "sim3" }).unwrap();
    writeln!(s, "pairs = {}", a.pairs).unwrap();
    writeln!(s, "ate = {:.2}°/{:.2}m", a.rmse_rot_deg, a.rmse_trans).unwrap();
    writeln!(s, "ate_rotation_deg = {:.6}", a.rmse_rot_deg).unwrap();
    writeln!(s, "ate_translation_m = {:.6}", a.rmse_trans).unwrap();
    writeln!(s, "scale = {:.6}", a.alignment.scale).unwrap();
    writeln!(s, "final_yaw_error_deg = {:.6}", final_yaw_error(&est, &reference, max_dt)?).unwrap();
    writeln!(s, "# segment_m count mean_deg median_deg rmse_deg").unwrap();
    for r in &rpe {
        writeln!(s, "rpe_yaw = {:.3} {} {:.6} {:.6} {:.6}", r.segment_length, r.count, r.mean_deg, r.median_deg, r.rmse_deg).unwrap();
    }
    if let Some(out) = out {
        let mut csv = String::from("segment_m,index,yaw_error_deg\n");
        for r in &rpe {
            for (i, e) in r.errors_deg.iter().enumerate() {
                writeln!(csv, "{},{},{}", r.segment_length, i, e).unwrap();
            }
        }
        io::write_atomic(out, csv.as_bytes())?;
    }
    Ok(s)
}

fn allan_cmd(input: &Path, columns: &[String], out: &Path, per_decade: usize) -> Result<String> {
    let file = input.display().to_string();
    let table = io::read_table(input)?;
    let t_col = table.column("t").ok_or_else(|| Error::Format { file: file.clone(), row: 1, msg: "missing column t".into() })?;
    let names: Vec<String> = if columns.is_empty() {
        table.header.iter().filter(|h| h.as_str() != "t").cloned().collect()
    } else {
        columns.to_vec()
    };
    let get = |row: usize, col: usize| -> Result<f64> {
        table.rows[row][col].ok_or_else(|| Error::Format { file: file.clone(), row: table.lines[row], msg: format!("missing value in column {}", table.header[col]) })
    };
    let n = table.rows.len();
    if n < 3 {
        return Err(Error::TauRange(format!("{file} has {n} rows, at least 3 are needed for one tau")));
    }
    let t: Vec<f64> = (0..n).map(|r| get(r, t_col)).collect::<Result<_>>()?;
    let dt = (t[n - 1] - t[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Ordering(format!("{file}: timestamps are not increasing")));
    }
    for (k, w) in t.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 0.01 * dt {
            return Err(Error::Format { file: file.clone(), row: table.lines[k + 1], msg: format!("non-uniform sampling: step {} s vs nominal {dt} s", w[1] - w[0]) });
        }
    }
    let max_m = (n - 1) / 2;
    let decades = (max_m as f64).log10();
    let count = ((decades * per_decade as f64).ceil() as usize + 1).max(2);
    let mut ms: Vec<usize> = allan::log_spaced_taus(1.0, max_m as f64, count).iter().map(|m| m.round() as usize).collect();
    ms.dedup();
    let taus: Vec<f64> = ms.iter().map(|&m| m as f64 * dt).collect();
    let mut cols = Vec::new();
    let mut report = String::new();
    for name in &names {
        let c = table.column(name).ok_or_else(|| Error::Config(format!("{file} has no column {name}")))?;
        let x: Vec<f64> = (0..n).map(|r| get(r, c)).collect::<Result<_>>()?;
        let pts = allan::allan_deviation(&x, 1.0 / dt, &taus)?;
        writeln!(report, "slope[{name}] = {:.4}", allan::loglog_slope(&pts)).unwrap();
        cols.push(pts);
    }
    let mut csv = String::from("tau");
    for name in &names {
        write!(csv, ",{name}").unwrap();
    }
    csv.push('\n');
    for (i, tau) in taus.iter().enumerate() {
        write!(csv, "{tau}").unwrap();
        for c in &cols {
            write!(csv, ",{}", c[i].deviation).unwrap();
        }
        csv.push('\n');
    }
    io::write_atomic(out, csv.as_bytes())?;
    writeln!(report, "taus = {}", taus.len()).unwrap();
    Ok(report)
}

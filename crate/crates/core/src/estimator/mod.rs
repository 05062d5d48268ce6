//! Keyframe sliding-window estimator and the end-to-end driver.

pub mod lm;
pub mod window;

pub use window::{keyframe_policy, FactorGraphWindow, FrameKind, MagMeasurement, MarginalizationPrior, WindowConfig, WindowState};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::eval::{TimedPose, Trajectory};
use crate::imu::{default_gravity, slice_segment, ImuNoiseParams, ImuSample, RepropagationThresholds, SystemState};
use crate::io::Dataset;
use crate::mag::{self, alignment, MagNoiseParams, MagSample};
use crate::vision::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub lm_initial_lambda: f64,
    pub lm_lambda_bounds: (f64, f64),
    pub huber_threshold_px: f64,
    pub convergence_tol: f64,
    /// Step size (largest tangent component) below which the solve stops.
    pub min_step: f64,
    pub m_kf: usize,
    pub m_recent: usize,
    pub mag_stride: usize,
    pub thresholds: RepropagationThresholds,
    pub keyframe_overlap: f64,
    /// Metres.
    pub keyframe_translation: f64,
    pub min_triangulation_angle_deg: f64,
    /// Landmarks reprojecting further than this after optimization are removed.
    pub outlier_px: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            lm_initial_lambda: 1e-4,
            lm_lambda_bounds: (1e-9, 1e4),
            huber_threshold_px: 2.0,
            convergence_tol: 1e-4,
            min_step: 1e-7,
            m_kf: 7,
            m_recent: 3,
            mag_stride: 1,
            thresholds: RepropagationThresholds::default(),
            keyframe_overlap: 0.6,
            keyframe_translation: 0.3,
            min_triangulation_angle_deg: 1.0,
            outlier_px: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lm_initial_lambda,
            self.lm_lambda_bounds.0,
            self.lm_lambda_bounds.1,
            self.huber_threshold_px,
            self.convergence_tol,
            self.min_step,
            self.keyframe_translation,
            self.thresholds.gyro,
            self.thresholds.accel,
            self.outlier_px,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("optimizer parameters must be positive: {self:?}")));
        }
        if self.lm_lambda_bounds.0 > self.lm_lambda_bounds.1 {
            return Err(Error::Config("lm_lambda_min exceeds lm_lambda_max".into()));
        }
        if self.max_iterations == 0 || self.m_recent == 0 || self.mag_stride == 0 {
            return Err(Error::Config("max_iterations, m_recent and mag_stride must be at least 1".into()));
        }
        if self.m_kf < 2 {
            return Err(Error::Config(format!("m_kf must be at least 2, got {}", self.m_kf)));
        }
        if !(0.0..=1.0).contains(&self.keyframe_overlap) || !(self.min_triangulation_angle_deg >= 0.0) {
            return Err(Error::Config("keyframe_overlap must lie in [0, 1] and the triangulation angle be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Vio,
    VioMag,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vio" => Ok(Mode::Vio),
            "vio_mag" => Ok(Mode::VioMag),
            other => Err(Error::Config(format!("unknown mode '{other}', expected vio or vio_mag"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vio => "vio",
            Mode::VioMag => "vio_mag",
        })
    }
}

/// Standard deviations of the first-state gauge prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugePrior {
    pub sigma_p: f64,
    pub sigma_yaw: f64,
    pub sigma_v: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
}

impl Default for GaugePrior {
    fn default() -> Self {
        Self {
            sigma_p: 0.01,
            sigma_yaw: 0.01,
            sigma_v: 0.01,
            sigma_bg: 0.005,
            sigma_ba: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub imu_noise: ImuNoiseParams,
    pub mag_noise: MagNoiseParams,
    pub gravity: Vector3<f64>,
    pub sigma_px: f64,
    /// Length of the stationary segment used for initialization, seconds.
    pub bootstrap_duration: f64,
    /// Stationarity test: gyro norm standard deviation (rad/s) and deviation
    /// of the mean accelerometer norm from gravity (m/s^2).
    pub stationary_gyro_std: f64,
    pub stationary_accel_tol: f64,
    pub gauge: GaugePrior,
    /// Largest gap between magnetometer samples bridged by interpolation.
    pub mag_max_gap: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Vio,
            optimizer: OptimizerConfig::default(),
            imu_noise: ImuNoiseParams::default(),
            mag_noise: MagNoiseParams::default(),
            gravity: default_gravity(),
            sigma_px: 1.0,
            bootstrap_duration: 1.0,
            stationary_gyro_std: 0.01,
            stationary_accel_tol: 0.2,
            gauge: GaugePrior::default(),
            mag_max_gap: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.imu_noise.validate()?;
        self.mag_noise.validate()?;
        let g = &self.gauge;
        let positive = [
            self.sigma_px,
            self.bootstrap_duration,
            self.stationary_gyro_std,
            self.stationary_accel_tol,
            self.mag_max_gap,
            g.sigma_p,
            g.sigma_yaw,
            g.sigma_v,
            g.sigma_bg,
            g.sigma_ba,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("run parameters and gauge sigmas must be positive".into()));
        }
        if !self.gravity.iter().all(|v| v.is_finite()) || self.gravity.norm() == 0.0 {
            return Err(Error::Config("gravity must be finite and non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunStats {
    pub frames: usize,
    pub keyframes: usize,
    pub lm_iterations: usize,
    pub landmarks_pruned: usize,
    pub stationary_bootstrap: bool,
    pub final_cost: f64,
    /// Wall-clock seconds spent per frame (add, optimize, marginalize).
    pub mean_frame_seconds: f64,
    pub max_frame_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Keyframe poses plus the newest state.
    pub trajectory: Trajectory,
    pub states: Vec<SystemState>,
    pub stats: RunStats,
}

/// Initial orientation and gyro bias from the leading segment of the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bootstrap {
    pub state: SystemState,
    pub stationary: bool,
}

fn mean(v: impl Iterator<Item = Vector3<f64>>) -> Option<Vector3<f64>> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for x in v {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Initializes the first state at time `t0` from the IMU (and, in
/// magnetometer mode, calibrated magnetometer) samples in the leading
/// `bootstrap_duration` seconds. Falls back to the first samples when the
/// segment is not stationary.
pub fn bootstrap(imu: &[ImuSample], mag: Option<&[MagSample]>, t0: f64, cfg: &RunConfig) -> Result<Bootstrap> {
    let first = imu.first().ok_or(Error::TooFewSamples { needed: 2, got: 0 })?;
    let t_end = first.t + cfg.bootstrap_duration;
    let seg: Vec<&ImuSample> = imu.iter().take_while(|s| s.t <= t_end + 1e-9).collect();
    let gyro_mean = mean(seg.iter().map(|s| s.gyro)).unwrap_or(first.gyro);
    let accel_mean = mean(seg.iter().map(|s| s.accel)).unwrap_or(first.accel);
    let gyro_var = seg.iter().map(|s| (s.gyro - gyro_mean).norm_squared()).sum::<f64>() / seg.len().max(1) as f64;
    let stationary = seg.len() >= 2
        && gyro_var.sqrt() <= cfg.stationary_gyro_std
        && (accel_mean.norm() - cfg.gravity.norm()).abs() <= cfg.stationary_accel_tol;

    let (accel, gyro, mag_mean) = if stationary {
        let m = mag.and_then(|m| mean(m.iter().take_while(|s| s.t <= t_end + 1e-9).map(|s| s.m)));
        (accel_mean, gyro_mean, m)
    } else {
        warn!("no stationary segment in the first {} s; aligning from the first samples", cfg.bootstrap_duration);
        (first.accel, Vector3::zeros(), mag.and_then(|m| m.first().map(|s| s.m)))
    };
    let q = match cfg.mode {
        Mode::VioMag => {
            let m = mag_mean.ok_or_else(|| Error::Config("vio_mag mode requires magnetometer samples".into()))?;
            alignment::initial_alignment(&accel, &m)?
        }
        Mode::Vio => alignment::gravity_alignment(&accel)?,
    };
    let mut state = SystemState::new(t0, Vector3::zeros(), q, Vector3::zeros());
    state.bg = gyro;
    Ok(Bootstrap { state, stationary })
}

/// Weak prior on position, yaw, velocity and biases of the first state.
pub fn gauge_prior(frame_id: u64, x: &SystemState, g: &GaugePrior) -> MarginalizationPrior {
    let mut j0 = DMatrix::zeros(13, 15);
    for i in 0..3 {
        j0[(i, i)] = 1.0 / g.sigma_p;
        j0[(4 + i, 6 + i)] = 1.0 / g.sigma_v;
        j0[(7 + i, 9 + i)] = 1.0 / g.sigma_bg;
        j0[(10 + i, 12 + i)] = 1.0 / g.sigma_ba;
    }
    // World yaw of a body-frame rotation increment is e_z^T R dtheta.
    let yaw_row = x.rotation().row(2) / g.sigma_yaw;
    for c in 0..3 {
        j0[(3, 3 + c)] = yaw_row[c];
    }
    MarginalizationPrior {
        frame_ids: vec![frame_id],
        linearization_states: vec![*x],
        j0,
        r0: DVector::zeros(13),
    }
}

fn timed(x: &SystemState) -> TimedPose {
    TimedPose { t: x.t, pose: Pose::new(x.p, x.q), v: x.v }
}

/// Runs the estimator over a whole dataset.
pub fn run_sequence(dataset: &Dataset, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    dataset.validate()?;
    let use_mag = cfg.mode == Mode::VioMag;
    let mag_cal: Option<Vec<MagSample>> = if use_mag {
        let raw = dataset.mag.as_ref().ok_or_else(|| Error::Config("vio_mag mode requires mag.csv".into()))?;
        let cal = dataset.magcal.as_ref().ok_or_else(|| Error::Config("vio_mag mode requires magcal.cfg".into()))?;
        Some(raw.iter().map(|s| cal.apply(s)).collect())
    } else {
        None
    };
    let first_frame = dataset
        .frames
        .iter()
        .position(|f| f.t >= dataset.imu[0].t - 1e-9)
        .ok_or_else(|| Error::Format { file: "tracks.csv".into(), row: 0, msg: "no frame inside the IMU time range".into() })?;
    let frames = &dataset.frames[first_frame..];
    let imu_end = dataset.imu.last().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);

    let boot = bootstrap(&dataset.imu, mag_cal.as_deref(), frames[0].t, cfg)?;
    let mut x0 = boot.state;
    x0.t = frames[0].t;

    let window_cfg = WindowConfig {
        optimizer: cfg.optimizer,
        imu_noise: cfg.imu_noise,
        mag_noise: use_mag.then_some(cfg.mag_noise),
        gravity: cfg.gravity,
        camera: dataset.camera,
        sigma_px: cfg.sigma_px,
    };
    let mut window = FactorGraphWindow::new(window_cfg);
    let obs = |f: &crate::vision::Frame| -> Vec<(u64, Vector2<f64>)> { f.observations.iter().map(|o| (o.landmark_id, o.uv)).collect() };
    let mag_at = |t: f64| mag_cal.as_deref().and_then(|m| mag::sample_at(m, t, cfg.mag_max_gap));
    window.bootstrap(frames[0].id, x0, obs(&frames[0]), mag_at(frames[0].t), gauge_prior(frames[0].id, &x0, &cfg.gauge))?;

    let mut stats = RunStats { frames: 1, keyframes: 1, stationary_bootstrap: boot.stationary, ..Default::default() };
    let mut out: Vec<SystemState> = Vec::new();
    let mut prev_t = frames[0].t;
    let mut busy = 0.0;
    for frame in &frames[1..] {
        if frame.t <= prev_t {
            return Err(Error::Ordering(format!("frame {} at t = {} does not follow t = {}", frame.id, frame.t, prev_t)));
        }
        if frame.t > imu_end + 1e-9 {
            break;
        }
        let started = Instant::now();
        let seg = slice_segment(&dataset.imu, prev_t, frame.t);
        let mags: Vec<MagMeasurement> = mag_cal
            .as_deref()
            .map(|m| {
                let lo = m.partition_point(|s| s.t <= prev_t + 1e-9);
                m[lo..].iter().take_while(|s| s.t <= frame.t + 1e-9).map(|s| MagMeasurement { t: s.t, m: s.m }).collect()
            })
            .unwrap_or_default();
        let kind = window.add_frame(frame.id, &seg, &mags, mag_at(frame.t), obs(frame))?;
        stats.frames += 1;
        if kind == FrameKind::Keyframe {
            stats.keyframes += 1;
        }
        let report = window.optimize()?;
        stats.lm_iterations += report.iterations;
        stats.final_cost = report.final_cost;
        stats.landmarks_pruned += window.prune_landmarks(cfg.optimizer.outlier_px);
        if let Some(m) = window.marginalize()? {
            if m.state.keyframe {
                out.push(m.state.x);
            }
        }
        let secs = started.elapsed().as_secs_f64();
        busy += secs;
        stats.max_frame_seconds = stats.max_frame_seconds.max(secs);
        debug!("frame {} t = {:.3} cost {:.3e} iterations {}", frame.id, frame.t, report.final_cost, report.iterations);
        prev_t = frame.t;
    }
    stats.mean_frame_seconds = busy / (stats.frames.max(2) - 1) as f64;
    let n = window.len();
    for (i, s) in window.states().iter().enumerate() {
        if s.keyframe || i + 1 == n {
            out.push(s.x);
        }
    }
    if out.iter().any(|x| !(x.p.iter().chain(x.v.iter()).all(|v| v.is_finite()))) {
        return Err(Error::Numerical("estimate diverged to non-finite values".into()));
    }
    let trajectory = Trajectory::new(out.iter().map(timed).collect())?;
    Ok(RunOutput { trajectory, states: out, stats })
}

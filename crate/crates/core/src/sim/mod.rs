//! Synthetic IMU, magnetometer and feature-track generation over analytic
//! trajectories.

pub mod trajectory;

pub use trajectory::{euler_zyx, GroundTruth, TrajectoryKind, TrajectoryModel};

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::{TimedPose, Trajectory};
use crate::imu::{default_gravity, ImuSample};
use crate::mag::{MagCalibration, MagSample, WorldField};
use crate::vision::{CameraModel, FeatureObservation, Frame, Landmark, Pose};

/// Closest landmark distance the simulated frontend still tracks, metres.
pub const MIN_TRACK_DEPTH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvModel {
    pub g_w: Vector3<f64>,
    pub field: WorldField,
}

impl Default for EnvModel {
    fn default() -> Self {
        Self {
            g_w: default_gravity(),
            field: WorldField::from_angles(60.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectoryModel,
    pub imu_rate: f64,
    /// Must divide `imu_rate`; magnetometer samples share IMU timestamps.
    pub mag_rate: f64,
    pub cam_rate: f64,
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
    pub bg0: Vector3<f64>,
    pub ba0: Vector3<f64>,
    pub sigma_m: f64,
    pub sigma_px: f64,
    pub inclination_deg: f64,
    pub declination_deg: f64,
    pub soft_iron: Matrix3<f64>,
    pub hard_iron: Vector3<f64>,
    pub landmark_count: usize,
    pub tube_radius: (f64, f64),
    pub max_range: f64,
    pub camera: CameraModel,
    pub gravity: Vector3<f64>,
    pub seed: u64,
}

/// Forward-looking camera: optical axis along body x, image x to the right
/// (body -y), image y down (body -z).
pub fn default_camera() -> CameraModel {
    let r_bc = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    CameraModel {
        fx: 400.0,
        fy: 400.0,
        cx: 320.0,
        cy: 240.0,
        width: 640.0,
        height: 480.0,
        t_bc: Pose::new(Vector3::zeros(), crate::so3::matrix_to_quat(&r_bc)),
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryModel::new(TrajectoryKind::circle(5.0, 0.1), 60.0).with_lead_in(1.0, 3.0),
            imu_rate: 200.0,
            mag_rate: 200.0,
            cam_rate: 15.0,
            sigma_g: 0.0,
            sigma_a: 0.0,
            sigma_bg: 0.0,
            sigma_ba: 0.0,
            bg0: Vector3::zeros(),
            ba0: Vector3::zeros(),
            sigma_m: 0.0,
            sigma_px: 0.0,
            inclination_deg: 60.0,
            declination_deg: 0.0,
            soft_iron: Matrix3::identity(),
            hard_iron: Vector3::zeros(),
            landmark_count: 400,
            tube_radius: (2.0, 6.0),
            max_range: 20.0,
            camera: default_camera(),
            gravity: default_gravity(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        let rates = [self.imu_rate, self.mag_rate, self.cam_rate];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("sensor rates must be positive".into()));
        }
        if self.cam_rate > self.imu_rate || self.mag_rate > self.imu_rate {
            return Err(Error::Config("camera and magnetometer rates cannot exceed the IMU rate".into()));
        }
        let ratio = self.imu_rate / self.mag_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("magnetometer rate must divide the IMU rate".into()));
        }
        let sigmas = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba, self.sigma_m, self.sigma_px];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("noise densities must be non-negative".into()));
        }
        if self.tube_radius.0 <= 0.0 || self.tube_radius.1 < self.tube_radius.0 {
            return Err(Error::Config("invalid landmark tube radii".into()));
        }
        MagCalibration::new(self.soft_iron.try_inverse().ok_or_else(|| Error::Config("soft-iron matrix is singular".into()))?, self.hard_iron)?;
        self.camera.validate()
    }

    pub fn env(&self) -> EnvModel {
        EnvModel {
            g_w: self.gravity,
            field: WorldField::from_angles(self.inclination_deg, self.declination_deg),
        }
    }

    /// Calibration that exactly inverts the configured distortion.
    pub fn true_calibration(&self) -> Result<MagCalibration> {
        let a = self.soft_iron.try_inverse().ok_or_else(|| Error::Config("soft-iron matrix is singular".into()))?;
        MagCalibration::new((a + a.transpose()) * 0.5, self.hard_iron)
    }

    pub fn imu_times(&self) -> Vec<f64> {
        let n = (self.trajectory.duration * self.imu_rate).round() as usize;
        (0..n).map(|i| i as f64 / self.imu_rate).collect()
    }

    /// Camera timestamps snapped to the IMU sample grid.
    pub fn frame_times(&self) -> Vec<f64> {
        let n_imu = (self.trajectory.duration * self.imu_rate).round() as usize;
        let mut out: Vec<f64> = Vec::new();
        let mut k = 0usize;
        loop {
            let idx = (k as f64 / self.cam_rate * self.imu_rate).round() as usize;
            if idx >= n_imu {
                break;
            }
            let t = idx as f64 / self.imu_rate;
            if out.last().is_none_or(|&l| t > l) {
                out.push(t);
            }
            k += 1;
        }
        out
    }
}

/// Independent RNG stream per sensor so that changing one generator does not
/// perturb the others.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

pub fn gen_imu(cfg: &SimConfig) -> Result<Vec<ImuSample>> {
    let env = cfg.env();
    let mut rng = stream(cfg.seed, 1);
    let dt = 1.0 / cfg.imu_rate;
    let (wn_g, wn_a) = (cfg.sigma_g / dt.sqrt(), cfg.sigma_a / dt.sqrt());
    let (rw_g, rw_a) = (cfg.sigma_bg * dt.sqrt(), cfg.sigma_ba * dt.sqrt());
    let (mut bg, mut ba) = (cfg.bg0, cfg.ba0);
    let mut out = Vec::new();
    for t in cfg.imu_times() {
        let gt = cfg.trajectory.ground_truth(t)?;
        let r = gt.pose.rotation();
        let gyro = gt.omega_b + bg + gauss3(&mut rng) * wn_g;
        let accel = r.transpose() * (gt.a_w - env.g_w) + ba + gauss3(&mut rng) * wn_a;
        out.push(ImuSample::new(t, gyro, accel));
        bg += gauss3(&mut rng) * rw_g;
        ba += gauss3(&mut rng) * rw_a;
    }
    Ok(out)
}

/// Raw magnetometer readings `S R^T m_W + h + noise`.
pub fn gen_mag(cfg: &SimConfig) -> Result<Vec<MagSample>> {
    let env = cfg.env();
    let mut rng = stream(cfg.seed, 2);
    let stride = (cfg.imu_rate / cfg.mag_rate).round() as usize;
    let mut out = Vec::new();
    for t in cfg.imu_times().into_iter().step_by(stride.max(1)) {
        let gt = cfg.trajectory.ground_truth(t)?;
        let m = cfg.soft_iron * env.field.measure(&gt.pose.q) + cfg.hard_iron + gauss3(&mut rng) * cfg.sigma_m;
        out.push(MagSample::new(t, m));
    }
    Ok(out)
}

/// Landmarks scattered in a tube of the configured radii around the path.
pub fn gen_landmarks(cfg: &SimConfig) -> Result<Vec<Landmark>> {
    let mut rng = stream(cfg.seed, 3);
    let traj = &cfg.trajectory;
    let moving_from = (traj.lead_in + traj.ramp).min(traj.duration);
    // Landmarks only need to cover one lap of a closed path.
    let span = match traj.kind {
        TrajectoryKind::Circle { rate, .. } if rate != 0.0 => (2.0 * std::f64::consts::PI / rate.abs() + traj.lead_in + traj.ramp).min(traj.duration),
        _ => traj.duration,
    };
    let (r0, r1) = cfg.tube_radius;
    let mut out = Vec::with_capacity(cfg.landmark_count);
    for id in 0..cfg.landmark_count {
        let t = (rng.random::<f64>() * span).min(traj.duration);
        let gt = traj.ground_truth(t.max(0.0))?;
        let tangent = if gt.v_w.norm() > 1e-6 {
            gt.v_w.normalize()
        } else {
            let g2 = traj.ground_truth(moving_from.max(t).min(traj.duration))?;
            if g2.v_w.norm() > 1e-6 { g2.v_w.normalize() } else { gt.pose.rotation().column(0).into_owned() }
        };
        let helper = if tangent.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let n1 = tangent.cross(&helper).normalize();
        let n2 = tangent.cross(&n1);
        let ang = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
        let rad = r0 + (r1 - r0) * rng.random::<f64>();
        let l = gt.pose.p + (n1 * ang.cos() + n2 * ang.sin()) * rad;
        out.push(Landmark::new(id as u64, l));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTracks {
    pub frames: Vec<Frame>,
    /// Landmark behind each track id. A landmark that leaves the view and
    /// comes back later starts a fresh track, as a frontend without loop
    /// closure would report it.
    pub track_landmark: HashMap<u64, u64>,
}

pub fn gen_feature_tracks(cfg: &SimConfig, landmarks: &[Landmark]) -> Result<FeatureTracks> {
    let mut rng = stream(cfg.seed, 4);
    let cam = &cfg.camera;
    let mut frames = Vec::new();
    let mut track_landmark = HashMap::new();
    // landmark index -> (last frame seen, track id)
    let mut live: HashMap<usize, (u64, u64)> = HashMap::new();
    let mut next_track = 0u64;
    for (fid, t) in cfg.frame_times().into_iter().enumerate() {
        let fid = fid as u64;
        let gt = cfg.trajectory.ground_truth(t)?;
        let mut observations = Vec::new();
        for (li, lm) in landmarks.iter().enumerate() {
            let x_c = cam.to_camera(&gt.pose, &lm.l_w);
            if x_c.z < MIN_TRACK_DEPTH || x_c.norm() > cfg.max_range {
                continue;
            }
            let Ok(uv) = cam.project_camera(&x_c) else { continue };
            if !cam.in_bounds(&uv) {
                continue;
            }
            let noise = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)) * cfg.sigma_px;
            let uv_noisy = uv + noise;
            if !cam.in_bounds(&uv_noisy) {
                continue;
            }
            let track = match live.get(&li) {
                Some(&(last, tr)) if last + 1 == fid => tr,
                _ => {
                    next_track += 1;
                    track_landmark.insert(next_track, lm.id);
                    next_track
                }
            };
            live.insert(li, (fid, track));
            observations.push(FeatureObservation {
                frame_id: fid,
                landmark_id: track,
                uv: uv_noisy,
                sigma_px: cfg.sigma_px.max(1e-3),
            });
        }
        frames.push(Frame { id: fid, t, observations });
    }
    Ok(FeatureTracks { frames, track_landmark })
}

/// Ground truth sampled at the IMU rate.
pub fn gen_groundtruth(cfg: &SimConfig) -> Result<Trajectory> {
    let poses = cfg
        .imu_times()
        .into_iter()
        .map(|t| {
            let gt = cfg.trajectory.ground_truth(t)?;
            Ok(TimedPose { t, pose: gt.pose, v: gt.v_w })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(poses)
}

/// All simulated streams for one configuration.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub imu: Vec<ImuSample>,
    pub mag: Vec<MagSample>,
    pub landmarks: Vec<Landmark>,
    pub tracks: FeatureTracks,
    pub groundtruth: Trajectory,
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let landmarks = gen_landmarks(cfg)?;
    Ok(Simulation {
        imu: gen_imu(cfg)?,
        mag: gen_mag(cfg)?,
        tracks: gen_feature_tracks(cfg, &landmarks)?,
        landmarks,
        groundtruth: gen_groundtruth(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stationary() -> SimConfig {
        SimConfig {
            trajectory: TrajectoryModel::new(TrajectoryKind::Stationary { yaw: 0.0 }, 2.0),
            ..SimConfig::default()
        }
    }

    #[test]
    fn stationary_imu_reads_gravity_reaction() {
        let cfg = stationary();
        for s in gen_imu(&cfg).unwrap() {
            assert_relative_eq!(s.accel, -cfg.gravity, epsilon = 1e-12);
            assert_eq!(s.gyro, Vector3::zeros());
        }
    }

    #[test]
    fn identity_orientation_reads_world_field() {
        let cfg = stationary();
        let m_w = cfg.env().field.vector();
        for s in gen_mag(&cfg).unwrap() {
            assert_relative_eq!(s.m, m_w, epsilon = 1e-12);
        }
    }

    #[test]
    fn yawed_body_sees_rotated_field() {
        let cfg = SimConfig {
            trajectory: TrajectoryModel::new(TrajectoryKind::Stationary { yaw: std::f64::consts::FRAC_PI_2 }, 1.0),
            inclination_deg: 0.0,
            ..SimConfig::default()
        };
        let m = gen_mag(&cfg).unwrap()[0].m;
        assert_relative_eq!(m, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn sample_counts_follow_rates() {
        let cfg = SimConfig::default();
        assert_eq!(gen_imu(&cfg).unwrap().len(), 12000);
        assert_eq!(gen_mag(&cfg).unwrap().len(), 12000);
        assert_eq!(cfg.frame_times().len(), 900);
    }

    #[test]
    fn noisy_generation_is_deterministic() {
        let cfg = SimConfig {
            sigma_g: 1e-3,
            sigma_a: 1e-2,
            sigma_bg: 1e-5,
            sigma_ba: 1e-4,
            sigma_m: 0.005,
            sigma_px: 1.0,
            seed: 7,
            trajectory: TrajectoryModel::new(TrajectoryKind::circle(5.0, 0.1), 5.0),
            ..SimConfig::default()
        };
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.mag, b.mag);
        assert_eq!(a.tracks, b.tracks);
    }

    #[test]
    fn landmark_on_optical_axis_and_behind() {
        let cfg = SimConfig {
            trajectory: TrajectoryModel::new(TrajectoryKind::Stationary { yaw: 0.0 }, 0.2),
            ..SimConfig::default()
        };
        let lms = [Landmark::new(0, Vector3::new(3.0, 0.0, 0.0)), Landmark::new(1, Vector3::new(-3.0, 0.0, 0.0))];
        let tracks = gen_feature_tracks(&cfg, &lms).unwrap();
        for f in &tracks.frames {
            assert_eq!(f.observations.len(), 1);
            assert_relative_eq!(f.observations[0].uv, Vector2::new(320.0, 240.0), epsilon = 1e-12);
            assert_eq!(tracks.track_landmark[&f.observations[0].landmark_id], 0);
        }
    }
}

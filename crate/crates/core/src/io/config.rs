//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{Mode, RunConfig};
use crate::mag::MagCalibration;
use crate::sim::{SimConfig, TrajectoryKind, TrajectoryModel};
use crate::vision::{CameraModel, Pose};

/// Parsed entries. Getters consume keys so that leftovers can be reported
/// as unknown.
#[derive(Debug, Clone)]
pub struct KeyValues {
    file: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                file: file.into(),
                row: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Format { file: file.into(), row: i + 1, msg: "empty key".into() });
            }
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Format { file: file.into(), row: i + 1, msg: format!("duplicate key '{k}'") });
            }
        }
        Ok(Self { file: file.into(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn err(&self, row: usize, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Format { file: self.file.clone(), row, msg: format!("{key}: {msg}") }
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((row, v)) = self.entries.remove(key) else { return Ok(None) };
        v.parse::<T>().map(Some).map_err(|e| self.err(row, key, format!("cannot parse '{v}': {e}")))
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        let Some((row, v)) = self.entries.remove(key) else { return Ok(None) };
        parse_finite(&v).map(Some).map_err(|m| self.err(row, key, m))
    }

    pub fn take_floats(&mut self, key: &str, n: usize) -> Result<Option<Vec<f64>>> {
        let Some((row, v)) = self.entries.remove(key) else { return Ok(None) };
        let vals = v
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(parse_finite)
            .collect::<std::result::Result<Vec<f64>, String>>()
            .map_err(|m| self.err(row, key, m))?;
        if vals.len() != n {
            return Err(self.err(row, key, format!("expected {n} numbers, got {}", vals.len())));
        }
        Ok(Some(vals))
    }

    pub fn take_vec3(&mut self, key: &str) -> Result<Option<Vector3<f64>>> {
        Ok(self.take_floats(key, 3)?.map(|v| Vector3::new(v[0], v[1], v[2])))
    }

    /// Row-major 3x3 matrix.
    pub fn take_mat3(&mut self, key: &str) -> Result<Option<Matrix3<f64>>> {
        Ok(self.take_floats(key, 9)?.map(|v| Matrix3::from_row_slice(&v)))
    }

    fn set_f64(&mut self, key: &str, dst: &mut f64) -> Result<()> {
        if let Some(v) = self.take_f64(key)? {
            *dst = v;
        }
        Ok(())
    }

    fn set<T: FromStr>(&mut self, key: &str, dst: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *dst = v;
        }
        Ok(())
    }

    /// Fails on any key that no getter consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (row, _))) => Err(Error::Format { file: self.file, row, msg: format!("unknown key '{k}'") }),
        }
    }
}

fn parse_finite(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("cannot parse '{s}': {e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite value '{s}'"))
    }
}

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn take_camera_keys(kv: &mut KeyValues, cam: &mut CameraModel) -> Result<()> {
    kv.set_f64("fx", &mut cam.fx)?;
    kv.set_f64("fy", &mut cam.fy)?;
    kv.set_f64("cx", &mut cam.cx)?;
    kv.set_f64("cy", &mut cam.cy)?;
    kv.set_f64("width", &mut cam.width)?;
    kv.set_f64("height", &mut cam.height)?;
    if let Some(q) = kv.take_floats("q_bc", 4)? {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if (quat.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("q_bc must be a unit quaternion, norm is {}", quat.norm())));
        }
        cam.t_bc.q = super::exact_unit(&quat);
    }
    if let Some(p) = kv.take_vec3("p_bc")? {
        cam.t_bc.p = p;
    }
    Ok(())
}

pub fn parse_camera(kv: &mut KeyValues) -> Result<CameraModel> {
    let mut cam = CameraModel {
        fx: f64::NAN,
        fy: f64::NAN,
        cx: f64::NAN,
        cy: f64::NAN,
        width: f64::NAN,
        height: f64::NAN,
        t_bc: Pose::identity(),
    };
    take_camera_keys(kv, &mut cam)?;
    for (name, v) in [("fx", cam.fx), ("fy", cam.fy), ("cx", cam.cx), ("cy", cam.cy), ("width", cam.width), ("height", cam.height)] {
        if v.is_nan() {
            return Err(Error::Config(format!("camera configuration is missing '{name}'")));
        }
    }
    cam.validate()?;
    Ok(cam)
}

pub fn camera_to_string(cam: &CameraModel) -> String {
    let q: &UnitQuaternion<f64> = &cam.t_bc.q;
    format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n# body-from-camera rotation (w x y z) and translation\nq_bc = {}\np_bc = {}\n",
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.width,
        cam.height,
        fmt_floats(&[q.w, q.i, q.j, q.k]),
        fmt_floats(cam.t_bc.p.as_slice()),
    )
}

pub fn parse_magcal(kv: &mut KeyValues) -> Result<MagCalibration> {
    let a = kv.take_mat3("a")?.ok_or_else(|| Error::Config("magnetometer calibration is missing 'a'".into()))?;
    let h = kv.take_vec3("h")?.ok_or_else(|| Error::Config("magnetometer calibration is missing 'h'".into()))?;
    MagCalibration::new(a, h)
}

pub fn magcal_to_string(cal: &MagCalibration) -> String {
    let r = cal.to_record();
    format!(
        "# corrected = a * (raw - h)\na = {}\nh = {}\n",
        fmt_floats(&r[..9]),
        fmt_floats(&r[9..]),
    )
}

fn parse_trajectory(kv: &mut KeyValues, base: &TrajectoryModel) -> Result<TrajectoryModel> {
    let name = kv.take_str("trajectory").unwrap_or_else(|| base.kind.name().to_string());
    let mut kind = match (name.as_str(), base.kind) {
        (n, k) if n == k.name() => k,
        ("circle", _) => TrajectoryKind::circle(5.0, 0.1),
        ("lissajous", _) => TrajectoryKind::Lissajous {
            amp: Vector3::new(4.0, 3.0, 0.5),
            freq: Vector3::new(0.1, 0.2, 0.15),
            yaw_amp: 0.5,
            yaw_freq: 0.1,
        },
        ("stationary", _) => TrajectoryKind::Stationary { yaw: 0.0 },
        ("tumble", _) => TrajectoryKind::Tumble { yaw_rate: 0.5, pitch_freq: 0.13, roll_rate: 0.31 },
        (other, _) => return Err(Error::Config(format!("unknown trajectory '{other}'"))),
    };
    match &mut kind {
        TrajectoryKind::Circle { radius, rate, height_amp, height_freq, roll_amp, pitch_amp, wobble_freq } => {
            kv.set_f64("radius", radius)?;
            kv.set_f64("angular_rate", rate)?;
            kv.set_f64("height_amp", height_amp)?;
            kv.set_f64("height_freq", height_freq)?;
            kv.set_f64("roll_amp", roll_amp)?;
            kv.set_f64("pitch_amp", pitch_amp)?;
            kv.set_f64("wobble_freq", wobble_freq)?;
        }
        TrajectoryKind::Lissajous { amp, freq, yaw_amp, yaw_freq } => {
            if let Some(v) = kv.take_vec3("amp")? {
                *amp = v;
            }
            if let Some(v) = kv.take_vec3("freq")? {
                *freq = v;
            }
            kv.set_f64("yaw_amp", yaw_amp)?;
            kv.set_f64("yaw_freq", yaw_freq)?;
        }
        TrajectoryKind::Stationary { yaw } => kv.set_f64("yaw", yaw)?,
        TrajectoryKind::Tumble { yaw_rate, pitch_freq, roll_rate } => {
            kv.set_f64("yaw_rate", yaw_rate)?;
            kv.set_f64("pitch_freq", pitch_freq)?;
            kv.set_f64("roll_rate", roll_rate)?;
        }
    }
    let mut model = TrajectoryModel { kind, ..*base };
    kv.set_f64("duration", &mut model.duration)?;
    kv.set_f64("lead_in", &mut model.lead_in)?;
    kv.set_f64("ramp", &mut model.ramp)?;
    Ok(model)
}

/// Simulator configuration on top of [`SimConfig::default`].
pub fn parse_sim_config(mut kv: KeyValues) -> Result<SimConfig> {
    let mut c = SimConfig::default();
    c.trajectory = parse_trajectory(&mut kv, &c.trajectory)?;
    kv.set_f64("imu_rate", &mut c.imu_rate)?;
    kv.set_f64("mag_rate", &mut c.mag_rate)?;
    kv.set_f64("cam_rate", &mut c.cam_rate)?;
    kv.set_f64("sigma_g", &mut c.sigma_g)?;
    kv.set_f64("sigma_a", &mut c.sigma_a)?;
    kv.set_f64("sigma_bg", &mut c.sigma_bg)?;
    kv.set_f64("sigma_ba", &mut c.sigma_ba)?;
    if let Some(v) = kv.take_vec3("bg0")? {
        c.bg0 = v;
    }
    if let Some(v) = kv.take_vec3("ba0")? {
        c.ba0 = v;
    }
    kv.set_f64("sigma_m", &mut c.sigma_m)?;
    kv.set_f64("sigma_px", &mut c.sigma_px)?;
    kv.set_f64("inclination_deg", &mut c.inclination_deg)?;
    kv.set_f64("declination_deg", &mut c.declination_deg)?;
    if let Some(m) = kv.take_mat3("soft_iron")? {
        c.soft_iron = m;
    }
    if let Some(v) = kv.take_vec3("hard_iron")? {
        c.hard_iron = v;
    }
    kv.set("landmark_count", &mut c.landmark_count)?;
    kv.set_f64("tube_radius_min", &mut c.tube_radius.0)?;
    kv.set_f64("tube_radius_max", &mut c.tube_radius.1)?;
    kv.set_f64("max_range", &mut c.max_range)?;
    if let Some(g) = kv.take_vec3("gravity")? {
        c.gravity = g;
    }
    kv.set("seed", &mut c.seed)?;
    take_camera_keys(&mut kv, &mut c.camera)?;
    kv.finish()?;
    c.validate()?;
    Ok(c)
}

/// Estimator configuration on top of [`RunConfig::default`].
pub fn parse_run_config(mut kv: KeyValues) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(m) = kv.take_str("mode") {
        c.mode = Mode::from_str(&m)?;
    }
    let o = &mut c.optimizer;
    kv.set("max_iterations", &mut o.max_iterations)?;
    kv.set_f64("lm_initial_lambda", &mut o.lm_initial_lambda)?;
    kv.set_f64("lm_lambda_min", &mut o.lm_lambda_bounds.0)?;
    kv.set_f64("lm_lambda_max", &mut o.lm_lambda_bounds.1)?;
    kv.set_f64("huber_threshold_px", &mut o.huber_threshold_px)?;
    kv.set_f64("convergence_tol", &mut o.convergence_tol)?;
    kv.set_f64("min_step", &mut o.min_step)?;
    kv.set("m_kf", &mut o.m_kf)?;
    kv.set("m_recent", &mut o.m_recent)?;
    kv.set("mag_stride", &mut o.mag_stride)?;
    kv.set_f64("repropagation_gyro", &mut o.thresholds.gyro)?;
    kv.set_f64("repropagation_accel", &mut o.thresholds.accel)?;
    kv.set_f64("keyframe_overlap", &mut o.keyframe_overlap)?;
    kv.set_f64("keyframe_translation", &mut o.keyframe_translation)?;
    kv.set_f64("min_triangulation_angle_deg", &mut o.min_triangulation_angle_deg)?;
    kv.set_f64("outlier_px", &mut o.outlier_px)?;
    let n = &mut c.imu_noise;
    kv.set_f64("sigma_g", &mut n.sigma_g)?;
    kv.set_f64("sigma_a", &mut n.sigma_a)?;
    kv.set_f64("sigma_bg", &mut n.sigma_bg)?;
    kv.set_f64("sigma_ba", &mut n.sigma_ba)?;
    kv.set_f64("imu_rate", &mut n.rate)?;
    kv.set_f64("sigma_m", &mut c.mag_noise.sigma_m)?;
    if let Some(g) = kv.take_vec3("gravity")? {
        c.gravity = g;
    }
    kv.set_f64("sigma_px", &mut c.sigma_px)?;
    kv.set_f64("bootstrap_duration", &mut c.bootstrap_duration)?;
    kv.set_f64("stationary_gyro_std", &mut c.stationary_gyro_std)?;
    kv.set_f64("stationary_accel_tol", &mut c.stationary_accel_tol)?;
    kv.set_f64("mag_max_gap", &mut c.mag_max_gap)?;
    let g = &mut c.gauge;
    kv.set_f64("prior_sigma_p", &mut g.sigma_p)?;
    kv.set_f64("prior_sigma_yaw", &mut g.sigma_yaw)?;
    kv.set_f64("prior_sigma_v", &mut g.sigma_v)?;
    kv.set_f64("prior_sigma_bg", &mut g.sigma_bg)?;
    kv.set_f64("prior_sigma_ba", &mut g.sigma_ba)?;
    kv.finish()?;
    c.validate()?;
    Ok(c)
}

use std::path::PathBuf;
use std::str::FromStr;

use magvio::estimator::{self, Mode};
use magvio::eval::{self, AlignmentMode};
use magvio::imu::{ImuNoiseParams, ImuSample};
use magvio::io::{self, KeyValues};
use magvio::mag::{self, MagSample};
use magvio::so3;
use nalgebra::{UnitQuaternion, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

type Vec3 = [f64; 3];
type Quat = [f64; 4];

fn to_py(e: magvio::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

fn v3(v: &Vector3<f64>) -> Vec3 {
    [v.x, v.y, v.z]
}

fn quat(q: &UnitQuaternion<f64>) -> Quat {
    [q.w, q.i, q.j, q.k]
}

fn unit(q: Quat) -> PyResult<UnitQuaternion<f64>> {
    let raw = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    if (raw.norm() - 1.0).abs() > 1e-6 {
        return Err(PyValueError::new_err(format!("quaternion norm {} is not 1", raw.norm())));
    }
    Ok(so3::canonical(&raw))
}

fn kv(text: Option<&str>, name: &str) -> PyResult<KeyValues> {
    KeyValues::parse(text.unwrap_or(""), name).map_err(to_py)
}

/// `exp` of a rotation vector as a `(w, x, y, z)` quaternion.
#[pyfunction]
fn quat_exp(omega: Vec3) -> Quat {
    quat(&so3::quat_exp(&Vector3::from(omega)))
}

/// Rotation vector of a `(w, x, y, z)` quaternion.
#[pyfunction]
fn quat_log(q: Quat) -> PyResult<Vec3> {
    Ok(v3(&so3::quat_log(&unit(q)?)))
}

#[pyclass(name = "Trajectory", module = "magvio", from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: eval::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_trajectory(&path).map_err(to_py)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_trajectory(&path, &self.inner).map_err(to_py)
    }

    fn to_csv(&self) -> String {
        io::trajectory_to_csv(&self.inner)
    }

    /// `(t, position, quaternion)` per pose.
    fn poses(&self) -> Vec<(f64, Vec3, Quat)> {
        self.inner.poses().iter().map(|p| (p.t, v3(&p.pose.p), quat(&p.pose.q))).collect()
    }

    fn path_length(&self) -> f64 {
        self.inner.path_length()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Dataset", module = "magvio")]
struct PyDataset {
    inner: io::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::Dataset::load(&dir).map_err(to_py)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(to_py)
    }

    #[getter]
    fn imu_count(&self) -> usize {
        self.inner.imu.len()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frames.len()
    }

    /// Raw magnetometer samples as `(t, m)`.
    fn mag(&self) -> Vec<(f64, Vec3)> {
        self.inner.mag.iter().flatten().map(|s| (s.t, v3(&s.m))).collect()
    }

    fn groundtruth(&self) -> Option<PyTrajectory> {
        self.inner.groundtruth.clone().map(|inner| PyTrajectory { inner })
    }
}

/// Simulates a dataset from `key = value` config text.
#[pyfunction]
#[pyo3(signature = (config = None, seed = None))]
fn simulate(config: Option<&str>, seed: Option<u64>) -> PyResult<PyDataset> {
    let mut cfg = io::parse_sim_config(kv(config, "<sim config>")?).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sim = magvio::sim::simulate(&cfg).map_err(to_py)?;
    let cal = cfg.true_calibration().map_err(to_py)?;
    Ok(PyDataset { inner: io::Dataset::from_simulation(&sim, cfg.camera, Some(cal)) })
}

/// Runs the estimator; returns the keyframe trajectory and run statistics.
#[pyfunction]
#[pyo3(signature = (dataset, config = None, mode = None))]
fn run_sequence(dataset: &PyDataset, config: Option<&str>, mode: Option<&str>) -> PyResult<(PyTrajectory, Vec<(String, f64)>)> {
    let mut cfg = io::parse_run_config(kv(config, "<run config>")?).map_err(to_py)?;
    if let Some(m) = mode {
        cfg.mode = Mode::from_str(m).map_err(to_py)?;
    }
    let out = estimator::run_sequence(&dataset.inner, &cfg).map_err(to_py)?;
    let s = out.stats;
    let stats = vec![
        ("frames".to_string(), s.frames as f64),
        ("keyframes".to_string(), s.keyframes as f64),
        ("lm_iterations".to_string(), s.lm_iterations as f64),
        ("final_cost".to_string(), s.final_cost),
    ];
    Ok((PyTrajectory { inner: out.trajectory }, stats))
}

fn alignment(mode: &str) -> PyResult<AlignmentMode> {
    match mode {
        "se3" => Ok(AlignmentMode::Se3),
        "sim3" => Ok(AlignmentMode::Sim3),
        other => Err(PyValueError::new_err(format!("alignment must be se3 or sim3, got {other}"))),
    }
}

/// `(rotation_deg, translation_m, scale)` after alignment.
#[pyfunction]
#[pyo3(signature = (est, reference, align = "se3", max_dt = 1e-3))]
fn ate(est: &PyTrajectory, reference: &PyTrajectory, align: &str, max_dt: f64) -> PyResult<(f64, f64, f64)> {
    let r = eval::ate(&est.inner, &reference.inner, alignment(align)?, max_dt).map_err(to_py)?;
    Ok((r.rmse_rot_deg, r.rmse_trans, r.alignment.scale))
}

/// Mean absolute relative yaw error in degrees per segment length.
#[pyfunction]
#[pyo3(signature = (est, reference, segment_lengths, max_dt = 1e-3))]
fn rpe_yaw(est: &PyTrajectory, reference: &PyTrajectory, segment_lengths: Vec<f64>, max_dt: f64) -> PyResult<Vec<(f64, f64)>> {
    let r = eval::rpe_yaw(&est.inner, &reference.inner, &segment_lengths, max_dt).map_err(to_py)?;
    Ok(r.iter().map(|s| (s.segment_length, s.mean_deg)).collect())
}

#[pyfunction]
#[pyo3(signature = (est, reference, max_dt = 1e-3))]
fn final_yaw_error(est: &PyTrajectory, reference: &PyTrajectory, max_dt: f64) -> PyResult<f64> {
    eval::final_yaw_error(&est.inner, &reference.inner, max_dt).map_err(to_py)
}

/// `s R x + t` fit of `est` points onto `reference` points.
#[pyfunction]
#[pyo3(signature = (est, reference, align = "sim3"))]
fn umeyama_align(est: Vec<Vec3>, reference: Vec<Vec3>, align: &str) -> PyResult<(f64, [[f64; 3]; 3], Vec3)> {
    let e: Vec<_> = est.into_iter().map(Vector3::from).collect();
    let r: Vec<_> = reference.into_iter().map(Vector3::from).collect();
    let a = eval::umeyama_align(&e, &r, alignment(align)?).map_err(to_py)?;
    let rot = a.rotation;
    let rows = [0, 1, 2].map(|i| [rot[(i, 0)], rot[(i, 1)], rot[(i, 2)]]);
    Ok((a.scale, rows, v3(&a.translation)))
}

#[pyclass(name = "MagCalibration", module = "magvio", from_py_object)]
#[derive(Clone)]
struct PyMagCalibration {
    inner: mag::MagCalibration,
}

#[pymethods]
impl PyMagCalibration {
    /// Soft-iron inverse, row-major.
    #[getter]
    fn a(&self) -> [[f64; 3]; 3] {
        let a = self.inner.a;
        [0, 1, 2].map(|i| [a[(i, 0)], a[(i, 1)], a[(i, 2)]])
    }

    #[getter]
    fn h(&self) -> Vec3 {
        v3(&self.inner.h)
    }

    fn correct(&self, raw: Vec3) -> Vec3 {
        v3(&self.inner.correct(&Vector3::from(raw)))
    }
}

fn mag_samples(samples: Vec<(f64, Vec3)>) -> Vec<MagSample> {
    samples.into_iter().map(|(t, m)| MagSample::new(t, Vector3::from(m))).collect()
}

#[pyfunction]
fn fit_ellipsoid(samples: Vec<(f64, Vec3)>) -> PyResult<PyMagCalibration> {
    Ok(PyMagCalibration { inner: mag::fit_ellipsoid(&mag_samples(samples)).map_err(to_py)? })
}

#[pyfunction]
fn fit_hard_iron(samples: Vec<(f64, Vec3)>) -> PyResult<PyMagCalibration> {
    Ok(PyMagCalibration { inner: mag::fit_hard_iron(&mag_samples(samples)).map_err(to_py)? })
}

/// `(tau, deviation)` pairs of the overlapping Allan deviation.
#[pyfunction]
fn allan_deviation(samples: Vec<f64>, rate: f64, taus: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    let pts = mag::allan_deviation(&samples, rate, &taus).map_err(to_py)?;
    Ok(pts.iter().map(|p| (p.tau, p.deviation)).collect())
}

/// Preintegrated IMU deltas over `(t, gyro, accel)` samples.
#[pyclass(name = "Preintegration", module = "magvio")]
struct PyPreintegration {
    inner: magvio::imu::PreintegratedImu,
}

#[pymethods]
impl PyPreintegration {
    #[new]
    #[pyo3(signature = (samples, bg = [0.0; 3], ba = [0.0; 3], sigma_g = 1e-3, sigma_a = 1e-2, sigma_bg = 1e-5, sigma_ba = 1e-4))]
    fn new(samples: Vec<(f64, Vec3, Vec3)>, bg: Vec3, ba: Vec3, sigma_g: f64, sigma_a: f64, sigma_bg: f64, sigma_ba: f64) -> PyResult<Self> {
        let s: Vec<ImuSample> = samples.into_iter().map(|(t, g, a)| ImuSample::new(t, Vector3::from(g), Vector3::from(a))).collect();
        let rate = if s.len() >= 2 { (s.len() - 1) as f64 / (s[s.len() - 1].t - s[0].t) } else { 1.0 };
        let noise = ImuNoiseParams { sigma_g, sigma_a, sigma_bg, sigma_ba, rate };
        noise.validate().map_err(to_py)?;
        let inner = magvio::imu::PreintegratedImu::from_samples(&s, Vector3::from(bg), Vector3::from(ba), noise).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha(&self) -> Vec3 {
        v3(&self.inner.alpha)
    }

    #[getter]
    fn beta(&self) -> Vec3 {
        v3(&self.inner.beta)
    }

    #[getter]
    fn gamma(&self) -> Quat {
        quat(&self.inner.gamma)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt_total
    }

    /// 15x15 covariance, row-major.
    fn covariance(&self) -> Vec<Vec<f64>> {
        let c = &self.inner.cov;
        (0..15).map(|i| (0..15).map(|j| c[(i, j)]).collect()).collect()
    }
}

#[pymodule]
#[pyo3(name = "magvio")]
fn magvio_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMagCalibration>()?;
    m.add_class::<PyPreintegration>()?;
    m.add_function(wrap_pyfunction!(quat_exp, m)?)?;
    m.add_function(wrap_pyfunction!(quat_log, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(rpe_yaw, m)?)?;
    m.add_function(wrap_pyfunction!(final_yaw_error, m)?)?;
    m.add_function(wrap_pyfunction!(umeyama_align, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ellipsoid, m)?)?;
    m.add_function(wrap_pyfunction!(fit_hard_iron, m)?)?;
    m.add_function(wrap_pyfunction!(allan_deviation, m)?)?;
    Ok(())
}

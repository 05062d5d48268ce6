//! Magnetometer measurement model and the preintegration-based relative
//! orientation residual.
//!
//! Corrected readings are unit vectors: the world field `m_W` is normalized
//! and calibration maps raw readings onto the unit sphere. For a measurement
//! at `t_j` in `(t_k, t_k+1]` the residual is
//!
//! ```text
//! e = R_k^T R_k+1 m_k+1 - dR_k^j m_j
//! ```
//!
//! where `dR_k^j` is the intermediate preintegrated rotation.

pub mod alignment;
pub mod allan;
pub mod calibration;

pub use alignment::initial_alignment;
pub use allan::{allan_deviation, loglog_slope, AllanPoint};
pub use calibration::{fit_ellipsoid, fit_hard_iron, MagCalibration};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::so3::{self, skew};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagSample {
    pub t: f64,
    pub m: Vector3<f64>,
}

impl MagSample {
    pub fn new(t: f64, m: Vector3<f64>) -> Self {
        Self { t, m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagNoiseParams {
    /// Per-sample standard deviation in normalized field units.
    pub sigma_m: f64,
}

impl Default for MagNoiseParams {
    fn default() -> Self {
        Self { sigma_m: 0.005 }
    }
}

impl MagNoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_m.is_finite() && self.sigma_m > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("sigma_m must be positive, got {}", self.sigma_m)))
        }
    }
}

/// Unit-norm Earth field in the ENU world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldField {
    m_w: Vector3<f64>,
}

impl WorldField {
    pub fn new(m_w: Vector3<f64>) -> Result<Self> {
        let n = m_w.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Config("world field must be non-zero".into()));
        }
        Ok(Self { m_w: m_w / n })
    }

    /// Field from inclination (positive down) and declination (east of north), degrees.
    pub fn from_angles(inclination_deg: f64, declination_deg: f64) -> Self {
        let (i, d) = (inclination_deg.to_radians(), declination_deg.to_radians());
        Self {
            m_w: Vector3::new(d.sin() * i.cos(), d.cos() * i.cos(), -i.sin()),
        }
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.m_w
    }

    /// Noise-free body-frame reading `R_WB^T m_W`.
    pub fn measure(&self, q_wb: &UnitQuaternion<f64>) -> Vector3<f64> {
        so3::quat_to_matrix(q_wb).transpose() * self.m_w
    }
}

/// Relative orientation residual between keyframes `k` and `k+1`.
pub fn mag_residual(
    gamma_k_j: &UnitQuaternion<f64>,
    q_wb_k: &UnitQuaternion<f64>,
    q_wb_k1: &UnitQuaternion<f64>,
    m_j: &Vector3<f64>,
    m_k1: &Vector3<f64>,
) -> Vector3<f64> {
    let rel = so3::quat_to_matrix(q_wb_k).transpose() * so3::quat_to_matrix(q_wb_k1);
    rel * m_k1 - so3::quat_to_matrix(gamma_k_j) * m_j
}

/// Jacobians of [`mag_residual`] w.r.t. `dtheta_k`, `dtheta_k+1` and the gyro
/// bias of state `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagJacobians {
    pub d_theta_k: Matrix3<f64>,
    pub d_theta_k1: Matrix3<f64>,
    pub d_bg: Matrix3<f64>,
}

/// `gamma_k_j` must already be bias corrected; `jac_gamma_bg` is the stored
/// d(gamma_k^j)/d(bg) and `dbg` the offset of the current bias from the
/// preintegration linearization point.
pub fn mag_residual_jacobians(
    gamma_k_j: &UnitQuaternion<f64>,
    jac_gamma_bg: &Matrix3<f64>,
    dbg: &Vector3<f64>,
    q_wb_k: &UnitQuaternion<f64>,
    q_wb_k1: &UnitQuaternion<f64>,
    m_j: &Vector3<f64>,
    m_k1: &Vector3<f64>,
) -> MagJacobians {
    let rk = so3::quat_to_matrix(q_wb_k);
    let rel = rk.transpose() * so3::quat_to_matrix(q_wb_k1);
    let dr = so3::quat_to_matrix(gamma_k_j);
    let jr = so3::right_jacobian(&(jac_gamma_bg * dbg));
    MagJacobians {
        d_theta_k: skew(&(rel * m_k1)),
        d_theta_k1: -rel * skew(m_k1),
        d_bg: dr * skew(m_j) * jr * jac_gamma_bg,
    }
}

/// Information matrix of one magnetometer residual. Both readings carry
/// independent noise, so the residual variance is `2 sigma_m^2`.
pub fn mag_weight(noise: &MagNoiseParams) -> Matrix3<f64> {
    Matrix3::identity() / (2.0 * noise.sigma_m * noise.sigma_m)
}

/// Linearly interpolates a magnetometer stream at time `t`, if `t` lies within
/// `max_gap` of the stream's samples.
pub fn sample_at(samples: &[MagSample], t: f64, max_gap: f64) -> Option<Vector3<f64>> {
    const EPS: f64 = 1e-9;
    let idx = samples.partition_point(|s| s.t < t - EPS);
    let hi = samples.get(idx)?;
    if (hi.t - t).abs() <= EPS {
        return Some(hi.m);
    }
    let lo = samples.get(idx.checked_sub(1)?)?;
    if hi.t - lo.t > max_gap {
        return None;
    }
    let s = (t - lo.t) / (hi.t - lo.t);
    Some(lo.m + (hi.m - lo.m) * s)
}

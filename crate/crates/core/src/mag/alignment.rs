use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::so3;

/// Minimum angle between the mean accelerometer and magnetometer vectors.
pub const MIN_ALIGNMENT_ANGLE_DEG: f64 = 5.0;

/// Orientation of the body in an East-North-Up world frame from a stationary
/// accelerometer mean (gravity reaction, pointing up) and a calibrated
/// magnetometer mean.
pub fn initial_alignment(accel_mean: &Vector3<f64>, mag_mean: &Vector3<f64>) -> Result<UnitQuaternion<f64>> {
    let (an, mn) = (accel_mean.norm(), mag_mean.norm());
    if !(an > 0.0 && mn > 0.0) || !an.is_finite() || !mn.is_finite() {
        return Err(Error::DegenerateAlignment("zero or non-finite input vector".into()));
    }
    let up = accel_mean / an;
    let east = mag_mean.cross(&up);
    let sin_angle = east.norm() / mn;
    if sin_angle < MIN_ALIGNMENT_ANGLE_DEG.to_radians().sin() {
        return Err(Error::DegenerateAlignment(format!(
            "magnetic field and gravity are within {MIN_ALIGNMENT_ANGLE_DEG} degrees of parallel"
        )));
    }
    let east = east.normalize();
    let north = up.cross(&east);
    // Rows of R_WB are the world axes expressed in the body frame.
    let r_wb = Matrix3::from_rows(&[east.transpose(), north.transpose(), up.transpose()]);
    Ok(so3::matrix_to_quat(&r_wb))
}

/// Roll and pitch from gravity only, zero yaw.
pub fn gravity_alignment(accel_mean: &Vector3<f64>) -> Result<UnitQuaternion<f64>> {
    let n = accel_mean.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateAlignment("zero accelerometer mean".into()));
    }
    let up_body = accel_mean / n;
    // Rotation taking the body-frame up direction onto world z, with the
    // smallest possible rotation; the result has zero yaw of the x axis only
    // approximately, so remove the residual heading explicitly.
    let q = UnitQuaternion::rotation_between(&up_body, &Vector3::z()).unwrap_or_else(|| {
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    });
    let heading = q * Vector3::x();
    let yaw = heading.y.atan2(heading.x);
    let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -yaw) * q;
    Ok(so3::canonical(q.quaternion()))
}

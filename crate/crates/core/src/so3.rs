//! Rotation kernels shared by every other module.
//!
//! Quaternions follow the Hamilton convention with `w` stored first
//! (`nalgebra::Quaternion::new(w, x, y, z)`). Every quaternion returned from
//! this module is normalized and lies in the `w >= 0` hemisphere.
//!
//! Tangent-space perturbations are applied on the right, `R * Exp(dtheta)`,
//! so `dtheta` is expressed in the body frame.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Below this angle the exponential and logarithm switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance used by [`log_so3`] when validating its input.
pub const ROTATION_CHECK_TOL: f64 = 1e-6;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula; second-order Taylor expansion near zero.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Principal logarithm with magnitude in `[0, pi]`.
///
/// The input is checked for orthonormality (`R^T R = I`, `det R = 1`) to
/// within [`ROTATION_CHECK_TOL`].
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !orth.is_finite() || orth > ROTATION_CHECK_TOL || (det - 1.0).abs() > ROTATION_CHECK_TOL {
        return Err(Error::InvalidRotation(format!(
            "orthonormality error {orth:.3e}, det {det:.9}"
        )));
    }
    Ok(log_so3_unchecked(r))
}

/// Logarithm without the orthonormality check. Goes through the quaternion,
/// which keeps both the `theta -> 0` and `theta -> pi` branches stable.
pub fn log_so3_unchecked(r: &Matrix3<f64>) -> Vector3<f64> {
    quat_log(&matrix_to_quat(r))
}

/// Flips the quaternion into the `w >= 0` hemisphere and renormalizes.
pub fn canonical(q: &Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { *q };
    UnitQuaternion::new_normalize(q)
}

pub fn quat_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    canonical(&Quaternion::new(w, s * omega.x, s * omega.y, s * omega.z))
}

pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical(q.quaternion());
    let v = q.imag();
    let n = v.norm();
    let w = q.w;
    if n < SMALL_ANGLE {
        // theta / n = 2 atan(n / w) / n
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

/// Hamilton product `a * b`, renormalized and canonicalized.
pub fn quat_multiply(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    canonical(&(a.quaternion() * b.quaternion()))
}

pub fn quat_to_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

pub fn matrix_to_quat(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    canonical(q.quaternion())
}

/// `q * Exp(dtheta)`: the retraction used for every orientation update.
pub fn boxplus(q: &UnitQuaternion<f64>, dtheta: &Vector3<f64>) -> UnitQuaternion<f64> {
    quat_multiply(q, &quat_exp(dtheta))
}

/// `Log(a^-1 * b)`.
pub fn boxminus(b: &UnitQuaternion<f64>, a: &UnitQuaternion<f64>) -> Vector3<f64> {
    quat_log(&quat_multiply(&a.inverse(), b))
}

/// Right Jacobian of SO(3): `Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Rotation about the world `z` axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    exp_so3(&Vector3::new(0.0, 0.0, angle))
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Projects a nearly orthonormal matrix back onto SO(3) via SVD.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_so3(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        let r = exp_so3(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn log_identity_and_half_turn() {
        assert_eq!(log_so3(&Matrix3::identity()).unwrap(), Vector3::zeros());
        let half = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let v = log_so3(&half).unwrap();
        assert_relative_eq!(v, Vector3::new(PI, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn log_rejects_non_rotation() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.1));
        assert!(matches!(log_so3(&m), Err(Error::InvalidRotation(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(log_so3(&reflect).is_err());
    }

    #[test]
    fn same_axis_rotations_compose_additively() {
        let a = quat_exp(&Vector3::new(0.0, 0.0, 0.2));
        let b = quat_exp(&Vector3::new(0.0, 0.0, 0.3));
        let c = quat_multiply(&a, &b);
        let expected = quat_exp(&Vector3::new(0.0, 0.0, 0.5));
        assert!((c.quaternion() - expected.quaternion()).norm() < 1e-12);
    }

    #[test]
    fn multiply_identity_and_inverse() {
        let a = quat_exp(&Vector3::new(0.3, -1.2, 0.7));
        let id = UnitQuaternion::identity();
        assert!((quat_multiply(&a, &id).quaternion() - a.quaternion()).norm() < 1e-15);
        let e = quat_multiply(&a, &a.inverse());
        assert!((e.quaternion() - id.quaternion()).norm() < 1e-15);
    }

    #[test]
    fn fixed_magnitude_round_trip() {
        let w = Vector3::new(0.1, -0.2, 0.2).normalize() * 0.3;
        let back = log_so3(&exp_so3(&w)).unwrap();
        assert!((back - w).norm() < 1e-10);
    }

    #[test]
    fn thousand_random_round_trips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if dir.norm() < 1e-3 {
                continue;
            }
            let v = dir.normalize() * rng.random_range(0.0..3.1);
            let back = log_so3(&exp_so3(&v)).unwrap();
            assert!((back - v).norm() < 1e-8, "{v:?} -> {back:?}");
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let v = Vector3::new(3e-9, -2e-9, 1e-9);
        let r = exp_so3(&v);
        assert!((log_so3(&r).unwrap() - v).norm() < 1e-20);
        let q = quat_exp(&v);
        assert!((quat_log(&q) - v).norm() < 1e-22);
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let phi = Vector3::new(0.4, -0.3, 0.9);
        let jr = right_jacobian(&phi);
        let r0 = exp_so3(&phi);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let plus = log_so3_unchecked(&(r0.transpose() * exp_so3(&(phi + d))));
            let minus = log_so3_unchecked(&(r0.transpose() * exp_so3(&(phi - d))));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jr.column(i)).norm() < 1e-8);
        }
        assert_relative_eq!(right_jacobian_inv(&phi) * jr, Matrix3::identity(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn quaternion_matrix_is_orthonormal(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, w in -1.0f64..1.0) {
            prop_assume!((x * x + y * y + z * z + w * w) > 1e-6);
            let q = canonical(&Quaternion::new(w, x, y, z));
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
            prop_assert!(q.w >= 0.0);
            let r = quat_to_matrix(&q);
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            let back = matrix_to_quat(&r);
            let d = (back.quaternion() - q.quaternion()).norm().min((back.quaternion() + q.quaternion()).norm());
            prop_assert!(d < 1e-10);
        }

        #[test]
        fn exp_times_exp_of_negation_is_identity(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, s in 0.0f64..PI) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-6);
            let w = v.normalize() * s;
            let p = exp_so3(&w) * exp_so3(&-w);
            prop_assert!((p - Matrix3::identity()).abs().max() < 1e-10);
        }
    }
}

//! Pinhole camera, world-frame point landmarks and reprojection factors.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::so3::{self, skew};

/// Minimum depth in the camera frame for a valid projection, metres.
pub const MIN_DEPTH: f64 = 1e-6;
/// Triangulated points reprojecting worse than this in any view are flagged.
pub const MAX_TRIANGULATION_ERROR_PX: f64 = 5.0;
pub const MIN_BASELINE: f64 = 0.01;

/// Rigid body pose `T_WB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(p: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self { p, q }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3::quat_to_matrix(&self.q)
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.p
    }

    pub fn inverse_transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (x - self.p)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.transform(&other.p), so3::quat_multiply(&self.q, &other.q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Camera pose in the body frame: `x_B = R_BC x_C + p_BC`.
    pub t_bc: Pose,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64, t_bc: Pose) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, t_bc };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(Error::Config("principal point outside the image".into()));
        }
        if !so3::is_rotation(&self.t_bc.rotation(), 1e-9) {
            return Err(Error::Config("camera extrinsic rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width && uv.y >= 0.0 && uv.y < self.height
    }

    /// Landmark in the camera frame for body pose `t_wb`.
    pub fn to_camera(&self, t_wb: &Pose, l_w: &Vector3<f64>) -> Vector3<f64> {
        self.t_bc.inverse_transform(&t_wb.inverse_transform(l_w))
    }

    pub fn project_camera(&self, x_c: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x_c.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(x_c.z));
        }
        Ok(Vector2::new(self.fx * x_c.x / x_c.z + self.cx, self.fy * x_c.y / x_c.z + self.cy))
    }

    pub fn project(&self, t_wb: &Pose, l_w: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_camera(&self.to_camera(t_wb, l_w))
    }

    /// Unit ray through pixel `uv`, in the camera frame.
    pub fn unproject(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0).normalize()
    }

    /// Camera centre and unit ray direction in the world frame.
    pub fn world_ray(&self, t_wb: &Pose, uv: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let t_wc = t_wb.compose(&self.t_bc);
        (t_wc.p, t_wc.rotation() * self.unproject(uv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LandmarkStatus {
    Active,
    Marginalized,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub l_w: Vector3<f64>,
    pub status: LandmarkStatus,
}

impl Landmark {
    pub fn new(id: u64, l_w: Vector3<f64>) -> Self {
        Self { id, l_w, status: LandmarkStatus::Active }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub frame_id: u64,
    pub landmark_id: u64,
    pub uv: Vector2<f64>,
    pub sigma_px: f64,
}

/// Feature observations of one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
}

/// `h(l) - z` in pixels.
pub fn reprojection_residual(obs: &FeatureObservation, cam: &CameraModel, t_wb: &Pose, l_w: &Vector3<f64>) -> Result<Vector2<f64>> {
    Ok(cam.project(t_wb, l_w)? - obs.uv)
}

pub fn reprojection_information(obs: &FeatureObservation) -> f64 {
    1.0 / (obs.sigma_px * obs.sigma_px)
}

/// Reprojection Jacobians w.r.t. the body pose `[dp, dtheta]` (world-frame
/// position, right-perturbed rotation) and the landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionJacobians {
    pub d_pose: SMatrix<f64, 2, 6>,
    pub d_landmark: Matrix2x3<f64>,
}

pub fn reprojection_jacobians(cam: &CameraModel, t_wb: &Pose, l_w: &Vector3<f64>) -> Result<ReprojectionJacobians> {
    let r_wb = t_wb.rotation();
    let r_bc = cam.t_bc.rotation();
    let x_b = r_wb.transpose() * (l_w - t_wb.p);
    let x_c = r_bc.transpose() * (x_b - cam.t_bc.p);
    if x_c.z <= MIN_DEPTH {
        return Err(Error::BehindCamera(x_c.z));
    }
    let iz = 1.0 / x_c.z;
    let d_proj = Matrix2x3::new(
        cam.fx * iz, 0.0, -cam.fx * x_c.x * iz * iz,
        0.0, cam.fy * iz, -cam.fy * x_c.y * iz * iz,
    );
    let a = d_proj * r_bc.transpose();
    let mut d_pose = SMatrix::<f64, 2, 6>::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-a * r_wb.transpose()));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(a * skew(&x_b)));
    Ok(ReprojectionJacobians {
        d_pose,
        d_landmark: a * r_wb.transpose(),
    })
}

/// Huber weight for a residual of norm `r` with threshold `k`.
pub fn huber_weight(r: f64, k: f64) -> f64 {
    if r <= k {
        1.0
    } else {
        k / r
    }
}

/// Huber loss of a residual of norm `r`.
pub fn huber_loss(r: f64, k: f64) -> f64 {
    if r <= k {
        0.5 * r * r
    } else {
        k * (r - 0.5 * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Worst reprojection error over the input views.
    pub max_error_px: f64,
    pub low_quality: bool,
}

/// Midpoint triangulation from two or more body poses and pixel observations.
pub fn triangulate(views: &[(Pose, Vector2<f64>)], cam: &CameraModel) -> Result<Triangulation> {
    if views.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: views.len() });
    }
    let rays: Vec<_> = views.iter().map(|(pose, uv)| cam.world_ray(pose, uv)).collect();
    let baseline = rays
        .iter()
        .flat_map(|a| rays.iter().map(move |b| (a.0 - b.0).norm()))
        .fold(0.0, f64::max);
    if baseline <= MIN_BASELINE {
        return Err(Error::InsufficientBaseline(format!("largest camera separation {baseline:.3e} m")));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in &rays {
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let eig = a.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let ill_conditioned = lo < 1e-9 * hi;
    let point = if ill_conditioned {
        let inv = eig.eigenvalues.map(|e| if e > 1e-9 * hi { 1.0 / e } else { 0.0 });
        eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose() * b
    } else {
        eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e)) * eig.eigenvectors.transpose() * b
    };
    let mut max_error_px: f64 = 0.0;
    let mut behind = false;
    for (pose, uv) in views {
        match cam.project(pose, &point) {
            Ok(p) => max_error_px = max_error_px.max((p - uv).norm()),
            Err(_) => behind = true,
        }
    }
    Ok(Triangulation {
        point,
        max_error_px,
        low_quality: ill_conditioned || behind || max_error_px > MAX_TRIANGULATION_ERROR_PX,
    })
}

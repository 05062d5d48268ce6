//! Trajectory alignment, absolute trajectory error and relative yaw error.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::so3;
use crate::vision::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose,
    /// World-frame velocity; zero when unknown.
    pub v: Vector3<f64>,
}

/// Poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<TimedPose>) -> Result<Self> {
        if let Some(w) = poses.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Ordering(format!("trajectory timestamps not increasing at t = {}", w[1].t)));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[TimedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].pose.p - w[0].pose.p).norm()).sum()
    }
}

/// Nearest-timestamp matching. Each pose is used at most once.
pub fn associate(a: &Trajectory, b: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    if !(max_dt > 0.0) {
        return Err(Error::Config(format!("max_dt must be positive, got {max_dt}")));
    }
    let bt: Vec<f64> = b.poses.iter().map(|p| p.t).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut last_j: Option<usize> = None;
    for (i, pa) in a.poses.iter().enumerate() {
        let k = bt.partition_point(|&t| t < pa.t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < bt.len() && last_j.is_none_or(|l| j > l))
            .min_by(|&x, &y| (bt[x] - pa.t).abs().total_cmp(&(bt[y] - pa.t).abs()));
        if let Some(j) = best {
            if (bt[j] - pa.t).abs() <= max_dt {
                pairs.push((i, j));
                last_j = Some(j);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyAssociation);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentMode {
    Sim3,
    Se3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub mode: AlignmentMode,
}

impl AlignmentResult {
    pub fn identity(mode: AlignmentMode) -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros(), mode }
    }

    /// `s R x + t`
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        if self.scale == 1.0 && self.rotation == Matrix3::identity() && self.translation == Vector3::zeros() {
            return *pose;
        }
        Pose::new(self.apply(&pose.p), so3::matrix_to_quat(&(self.rotation * pose.rotation())))
    }
}

/// Least-squares transform with `ref ~ s R est + t`.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>], mode: AlignmentMode) -> Result<AlignmentResult> {
    let n = est.len();
    if n != reference.len() {
        return Err(Error::Config("alignment point sets differ in size".into()));
    }
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!("{n} point pairs, need at least 3")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_r = reference.iter().sum::<Vector3<f64>>() * inv_n;
    let mut sigma = Matrix3::zeros();
    let mut cov_e = Matrix3::zeros();
    for (e, r) in est.iter().zip(reference) {
        let (de, dr) = (e - mu_e, r - mu_r);
        sigma += dr * de.transpose();
        cov_e += de * de.transpose();
    }
    sigma *= inv_n;
    cov_e *= inv_n;
    let var_e = cov_e.trace();
    let ev = cov_e.symmetric_eigenvalues();
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(f64::total_cmp);
    if !(var_e > 0.0) || sorted[1] <= 1e-12 * sorted[2].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateConfiguration("points are coincident or collinear".into()));
    }
    if est == reference {
        return Ok(AlignmentResult::identity(mode));
    }
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = match mode {
        AlignmentMode::Se3 => 1.0,
        AlignmentMode::Sim3 => (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e,
    };
    Ok(AlignmentResult {
        scale,
        rotation,
        translation: mu_r - rotation * mu_e * scale,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse_trans: f64,
    /// Geodesic rotation RMSE, degrees.
    pub rmse_rot_deg: f64,
    pub alignment: AlignmentResult,
    pub pairs: usize,
}

pub fn ate(est: &Trajectory, reference: &Trajectory, mode: AlignmentMode, max_dt: f64) -> Result<AteResult> {
    let pairs = associate(est, reference, max_dt)?;
    let pe: Vec<_> = pairs.iter().map(|&(i, _)| est.poses[i].pose.p).collect();
    let pr: Vec<_> = pairs.iter().map(|&(_, j)| reference.poses[j].pose.p).collect();
    let alignment = umeyama_align(&pe, &pr, mode)?;
    let mut se_t = 0.0;
    let mut se_r = 0.0;
    for &(i, j) in &pairs {
        let aligned = alignment.apply_pose(&est.poses[i].pose);
        let r = &reference.poses[j].pose;
        se_t += (aligned.p - r.p).norm_squared();
        se_r += so3::boxminus(&aligned.q, &r.q).norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(AteResult {
        rmse_trans: (se_t / n).sqrt(),
        rmse_rot_deg: (se_r / n).sqrt().to_degrees(),
        alignment,
        pairs: pairs.len(),
    })
}

/// Heading of the body x axis projected onto the world horizontal plane.
pub fn yaw_of(pose: &Pose) -> f64 {
    let x = pose.rotation().column(0).into_owned();
    x.y.atan2(x.x)
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r == -std::f64::consts::PI { std::f64::consts::PI } else { r }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpeYaw {
    pub segment_length: f64,
    pub count: usize,
    /// Absolute relative-yaw errors in degrees, one per segment start.
    pub errors_deg: Vec<f64>,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub rmse_deg: f64,
}

/// Relative yaw error over segments of the given path lengths.
pub fn rpe_yaw(est: &Trajectory, reference: &Trajectory, segment_lengths: &[f64], max_dt: f64) -> Result<Vec<RpeYaw>> {
    let pairs = associate(est, reference, max_dt)?;
    let mut dist = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (k, &(_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            acc += (reference.poses[j].pose.p - reference.poses[pairs[k - 1].1].pose.p).norm();
        }
        dist.push(acc);
    }
    let total = acc;
    let ye: Vec<f64> = pairs.iter().map(|&(i, _)| yaw_of(&est.poses[i].pose)).collect();
    let yr: Vec<f64> = pairs.iter().map(|&(_, j)| yaw_of(&reference.poses[j].pose)).collect();
    let mut out = Vec::with_capacity(segment_lengths.len());
    for &d in segment_lengths {
        if !(d > 0.0) {
            return Err(Error::Config(format!("segment length must be positive, got {d}")));
        }
        if d > total {
            return Err(Error::SegmentTooLong(d, total));
        }
        let mut errors_deg = Vec::new();
        let mut end = 0usize;
        for start in 0..pairs.len() {
            end = end.max(start);
            while end < pairs.len() && dist[end] - dist[start] < d {
                end += 1;
            }
            if end >= pairs.len() {
                break;
            }
            let de = wrap_angle(ye[end] - ye[start]);
            let dr = wrap_angle(yr[end] - yr[start]);
            errors_deg.push(wrap_angle(de - dr).abs().to_degrees());
        }
        out.push(summarize(d, errors_deg));
    }
    Ok(out)
}

/// Absolute heading drift between the first and last associated poses, in
/// degrees: the change of estimated yaw minus the change of reference yaw.
/// Insensitive to a constant yaw offset between the two frames.
pub fn final_yaw_error(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<f64> {
    let pairs = associate(est, reference, max_dt)?;
    let (&(i0, j0), &(i1, j1)) = (pairs.first().unwrap(), pairs.last().unwrap());
    let de = wrap_angle(yaw_of(&est.poses[i1].pose) - yaw_of(&est.poses[i0].pose));
    let dr = wrap_angle(yaw_of(&reference.poses[j1].pose) - yaw_of(&reference.poses[j0].pose));
    Ok(wrap_angle(de - dr).abs().to_degrees())
}

fn summarize(segment_length: f64, errors_deg: Vec<f64>) -> RpeYaw {
    let count = errors_deg.len();
    if count == 0 {
        return RpeYaw { segment_length, count, errors_deg, mean_deg: 0.0, median_deg: 0.0, rmse_deg: 0.0 };
    }
    let n = count as f64;
    let mean_deg = errors_deg.iter().sum::<f64>() / n;
    let rmse_deg = (errors_deg.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mut sorted = errors_deg.clone();
    sorted.sort_by(f64::total_cmp);
    let median_deg = if count % 2 == 1 { sorted[count / 2] } else { 0.5 * (sorted[count / 2 - 1] + sorted[count / 2]) };
    RpeYaw { segment_length, count, errors_deg, mean_deg, median_deg, rmse_deg }
}

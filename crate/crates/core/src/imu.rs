//! IMU preintegration between consecutive keyframes.
//!
//! The preintegrated error state is ordered `[dalpha, dbeta, dtheta, dbg, dba]`
//! and the state tangent used by the optimizer is `[dp, dtheta, dv, dbg, dba]`.
//! Gravity is a world-frame vector pointing down, so the accelerometer reads
//! `R^T (a - g)`.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::so3::{self, skew};

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;
pub type Matrix15x6 = SMatrix<f64, 15, 6>;
type Matrix15x18 = SMatrix<f64, 15, 18>;

pub const STANDARD_GRAVITY: f64 = 9.80665;

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

/// Offsets into the 15-dimensional state tangent `[dp, dtheta, dv, dbg, dba]`.
pub mod state_idx {
    pub const P: usize = 0;
    pub const THETA: usize = 3;
    pub const V: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
}

/// Offsets into the preintegration error state and the inertial residual.
pub mod err_idx {
    pub const ALPHA: usize = 0;
    pub const BETA: usize = 3;
    pub const THETA: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let s = (t - self.t) / (other.t - self.t);
        ImuSample {
            t,
            gyro: self.gyro + (other.gyro - self.gyro) * s,
            accel: self.accel + (other.accel - self.accel) * s,
        }
    }
}

/// Continuous-time noise densities of the inertial sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseParams {
    /// rad/s/sqrt(Hz)
    pub sigma_g: f64,
    /// m/s^2/sqrt(Hz)
    pub sigma_a: f64,
    /// rad/s^2/sqrt(Hz)
    pub sigma_bg: f64,
    /// m/s^3/sqrt(Hz)
    pub sigma_ba: f64,
    /// Hz
    pub rate: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            sigma_g: 1.0e-3,
            sigma_a: 1.0e-2,
            sigma_bg: 1.0e-5,
            sigma_ba: 1.0e-4,
            rate: 200.0,
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba, self.rate];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("IMU noise parameters must be positive: {self:?}")))
        }
    }
}

/// Pose, velocity and IMU biases at one keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl SystemState {
    pub fn new(t: f64, p: Vector3<f64>, q: UnitQuaternion<f64>, v: Vector3<f64>) -> Self {
        Self {
            t,
            p,
            q: so3::canonical(q.quaternion()),
            v,
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3::quat_to_matrix(&self.q)
    }

    /// Applies a tangent increment `[dp, dtheta, dv, dbg, dba]`.
    pub fn boxplus(&self, d: &Vector15) -> SystemState {
        use state_idx::*;
        SystemState {
            t: self.t,
            p: self.p + d.fixed_rows::<3>(P),
            q: so3::boxplus(&self.q, &d.fixed_rows::<3>(THETA).into_owned()),
            v: self.v + d.fixed_rows::<3>(V),
            bg: self.bg + d.fixed_rows::<3>(BG),
            ba: self.ba + d.fixed_rows::<3>(BA),
        }
    }

    /// Tangent difference `self [-] base`, the inverse of [`SystemState::boxplus`].
    pub fn boxminus(&self, base: &SystemState) -> Vector15 {
        use state_idx::*;
        let mut d = Vector15::zeros();
        d.fixed_rows_mut::<3>(P).copy_from(&(self.p - base.p));
        d.fixed_rows_mut::<3>(THETA).copy_from(&so3::boxminus(&self.q, &base.q));
        d.fixed_rows_mut::<3>(V).copy_from(&(self.v - base.v));
        d.fixed_rows_mut::<3>(BG).copy_from(&(self.bg - base.bg));
        d.fixed_rows_mut::<3>(BA).copy_from(&(self.ba - base.ba));
        d
    }
}

/// Preintegrated rotation `gamma_k^j` at an intermediate sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCheckpoint {
    pub t: f64,
    pub gamma: UnitQuaternion<f64>,
    /// d(gamma)/d(bg) in the right-perturbation sense.
    pub jac_bg: Matrix3<f64>,
}

/// Limits on how far the bias estimate may move before the first-order
/// correction is replaced by full repropagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepropagationThresholds {
    /// rad/s
    pub gyro: f64,
    /// m/s^2
    pub accel: f64,
}

impl Default for RepropagationThresholds {
    fn default() -> Self {
        Self { gyro: 0.01, accel: 0.1 }
    }
}

/// Bias-corrected preintegrated terms.
#[derive(Debug, Clone, Copy)]
pub struct CorrectedTerms {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion<f64>,
}

#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub t_start: f64,
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion<f64>,
    /// Covariance over `[dalpha, dbeta, dtheta, dbg, dba]`.
    pub cov: Matrix15,
    /// Jacobian of the error state w.r.t. `[bg, ba]`.
    pub jac_bias: Matrix15x6,
    pub bg_lin: Vector3<f64>,
    pub ba_lin: Vector3<f64>,
    pub dt_total: f64,
    pub checkpoints: Vec<GammaCheckpoint>,
    pub noise: ImuNoiseParams,
    samples: Vec<ImuSample>,
}

impl PreintegratedImu {
    pub fn new(t_start: f64, bg_lin: Vector3<f64>, ba_lin: Vector3<f64>, noise: ImuNoiseParams) -> Self {
        let mut jac_bias = Matrix15x6::zeros();
        jac_bias.fixed_view_mut::<6, 6>(err_idx::BG, 0).fill_with_identity();
        Self {
            t_start,
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            cov: Matrix15::zeros(),
            jac_bias,
            bg_lin,
            ba_lin,
            dt_total: 0.0,
            checkpoints: Vec::new(),
            noise,
            samples: Vec::new(),
        }
    }

    /// Integrates every consecutive pair of `samples`.
    pub fn from_samples(samples: &[ImuSample], bg_lin: Vector3<f64>, ba_lin: Vector3<f64>, noise: ImuNoiseParams) -> Result<Self> {
        let first = samples.first().ok_or(Error::TooFewSamples { needed: 2, got: 0 })?;
        if samples.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: 1 });
        }
        let mut pre = Self::new(first.t, bg_lin, ba_lin, noise);
        for w in samples.windows(2) {
            pre.integrate_measurement(&w[0], &w[1])?;
        }
        Ok(pre)
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.dt_total
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    /// Advances the preintegrated terms over `[s0.t, s1.t]` using midpoint
    /// quadrature, and propagates covariance and bias Jacobians.
    pub fn integrate_measurement(&mut self, s0: &ImuSample, s1: &ImuSample) -> Result<()> {
        let dt = s1.t - s0.t;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Ordering(format!("IMU samples at {} and {} are not increasing", s0.t, s1.t)));
        }
        if self.samples.is_empty() {
            self.samples.push(*s0);
        }
        self.samples.push(*s1);

        let w = 0.5 * (s0.gyro + s1.gyro) - self.bg_lin;
        let phi = w * dt;
        let dq = so3::quat_exp(&phi);
        let r0 = so3::quat_to_matrix(&self.gamma);
        let gamma1 = so3::quat_multiply(&self.gamma, &dq);
        let r1 = so3::quat_to_matrix(&gamma1);
        let a0 = s0.accel - self.ba_lin;
        let a1 = s1.accel - self.ba_lin;
        let acc = 0.5 * (r0 * a0 + r1 * a1);

        self.alpha += self.beta * dt + 0.5 * acc * dt * dt;
        self.beta += acc * dt;
        self.gamma = gamma1;
        self.dt_total += dt;

        use err_idx::*;
        let i3 = Matrix3::identity();
        let dr_t = so3::quat_to_matrix(&dq).transpose();
        let jr = so3::right_jacobian(&phi);
        let a0x = r0 * skew(&a0);
        let a1x = r1 * skew(&a1);
        let dt2 = dt * dt;

        let mut f = Matrix15::identity();
        f.fixed_view_mut::<3, 3>(ALPHA, BETA).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(ALPHA, THETA).copy_from(&(-0.25 * dt2 * (a0x + a1x * dr_t)));
        f.fixed_view_mut::<3, 3>(ALPHA, BG).copy_from(&(0.25 * dt2 * dt * a1x * jr));
        f.fixed_view_mut::<3, 3>(ALPHA, BA).copy_from(&(-0.25 * dt2 * (r0 + r1)));
        f.fixed_view_mut::<3, 3>(BETA, THETA).copy_from(&(-0.5 * dt * (a0x + a1x * dr_t)));
        f.fixed_view_mut::<3, 3>(BETA, BG).copy_from(&(0.5 * dt2 * a1x * jr));
        f.fixed_view_mut::<3, 3>(BETA, BA).copy_from(&(-0.5 * dt * (r0 + r1)));
        f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&dr_t);
        f.fixed_view_mut::<3, 3>(THETA, BG).copy_from(&(-jr * dt));

        // noise inputs: [na0, ng0, na1, ng1, nbg, nba]
        let mut g = Matrix15x18::zeros();
        let gyro_to_theta = 0.5 * jr * dt;
        g.fixed_view_mut::<3, 3>(ALPHA, 0).copy_from(&(0.25 * dt2 * r0));
        g.fixed_view_mut::<3, 3>(ALPHA, 6).copy_from(&(0.25 * dt2 * r1));
        let ag = -0.25 * dt2 * a1x * gyro_to_theta;
        g.fixed_view_mut::<3, 3>(ALPHA, 3).copy_from(&ag);
        g.fixed_view_mut::<3, 3>(ALPHA, 9).copy_from(&ag);
        g.fixed_view_mut::<3, 3>(BETA, 0).copy_from(&(0.5 * dt * r0));
        g.fixed_view_mut::<3, 3>(BETA, 6).copy_from(&(0.5 * dt * r1));
        let bgm = -0.5 * dt * a1x * gyro_to_theta;
        g.fixed_view_mut::<3, 3>(BETA, 3).copy_from(&bgm);
        g.fixed_view_mut::<3, 3>(BETA, 9).copy_from(&bgm);
        g.fixed_view_mut::<3, 3>(THETA, 3).copy_from(&gyro_to_theta);
        g.fixed_view_mut::<3, 3>(THETA, 9).copy_from(&gyro_to_theta);
        g.fixed_view_mut::<3, 3>(BG, 12).copy_from(&i3);
        g.fixed_view_mut::<3, 3>(BA, 15).copy_from(&i3);

        let n = &self.noise;
        let q_diag = [
            n.sigma_a * n.sigma_a / dt,
            n.sigma_g * n.sigma_g / dt,
            n.sigma_a * n.sigma_a / dt,
            n.sigma_g * n.sigma_g / dt,
            n.sigma_bg * n.sigma_bg * dt,
            n.sigma_ba * n.sigma_ba * dt,
        ];
        let mut gq = g;
        for (blk, q) in q_diag.iter().enumerate() {
            for c in 0..3 {
                gq.column_mut(3 * blk + c).scale_mut(*q);
            }
        }
        let cov = f * self.cov * f.transpose() + gq * g.transpose();
        self.cov = 0.5 * (cov + cov.transpose());
        self.jac_bias = f * self.jac_bias;

        self.checkpoints.push(GammaCheckpoint {
            t: s1.t,
            gamma: self.gamma,
            jac_bg: self.jac_bias.fixed_view::<3, 3>(THETA, 0).into_owned(),
        });
        Ok(())
    }

    /// Re-integrates the stored samples around new bias linearization points.
    pub fn repropagate(&self, bg: Vector3<f64>, ba: Vector3<f64>) -> Result<Self> {
        let mut pre = Self::new(self.t_start, bg, ba, self.noise);
        for w in self.samples.windows(2) {
            pre.integrate_measurement(&w[0], &w[1])?;
        }
        Ok(pre)
    }

    pub fn jac_alpha_bg(&self) -> Matrix3<f64> {
        self.jac_bias.fixed_view::<3, 3>(err_idx::ALPHA, 0).into_owned()
    }
    pub fn jac_alpha_ba(&self) -> Matrix3<f64> {
        self.jac_bias.fixed_view::<3, 3>(err_idx::ALPHA, 3).into_owned()
    }
    pub fn jac_beta_bg(&self) -> Matrix3<f64> {
        self.jac_bias.fixed_view::<3, 3>(err_idx::BETA, 0).into_owned()
    }
    pub fn jac_beta_ba(&self) -> Matrix3<f64> {
        self.jac_bias.fixed_view::<3, 3>(err_idx::BETA, 3).into_owned()
    }
    pub fn jac_gamma_bg(&self) -> Matrix3<f64> {
        self.jac_bias.fixed_view::<3, 3>(err_idx::THETA, 0).into_owned()
    }

    /// First-order bias correction of `(alpha, beta, gamma)`.
    ///
    /// Fails with [`Error::RepropagationRequired`] when the bias has moved past
    /// `thresholds`; the caller should then call [`PreintegratedImu::repropagate`].
    pub fn bias_correct(&self, bg: &Vector3<f64>, ba: &Vector3<f64>, thresholds: &RepropagationThresholds) -> Result<CorrectedTerms> {
        let dbg = (bg - self.bg_lin).norm();
        let dba = (ba - self.ba_lin).norm();
        if dbg > thresholds.gyro || dba > thresholds.accel {
            return Err(Error::RepropagationRequired { gyro: dbg, accel: dba });
        }
        Ok(self.corrected(bg, ba))
    }

    /// First-order correction without the threshold check.
    pub fn corrected(&self, bg: &Vector3<f64>, ba: &Vector3<f64>) -> CorrectedTerms {
        let dbg = bg - self.bg_lin;
        let dba = ba - self.ba_lin;
        CorrectedTerms {
            alpha: self.alpha + self.jac_alpha_bg() * dbg + self.jac_alpha_ba() * dba,
            beta: self.beta + self.jac_beta_bg() * dbg + self.jac_beta_ba() * dba,
            gamma: so3::boxplus(&self.gamma, &(self.jac_gamma_bg() * dbg)),
        }
    }

    /// Preintegrated rotation `gamma_k^j` and its gyro-bias Jacobian at time
    /// `t` in `[t_start, t_end]`. Times between samples are interpolated.
    pub fn gamma_at(&self, t: f64) -> Option<GammaCheckpoint> {
        const EPS: f64 = 1e-9;
        if (t - self.t_start).abs() <= EPS {
            return Some(GammaCheckpoint {
                t,
                gamma: UnitQuaternion::identity(),
                jac_bg: Matrix3::zeros(),
            });
        }
        if t < self.t_start - EPS || t > self.t_end() + EPS {
            return None;
        }
        let idx = self.checkpoints.partition_point(|c| c.t < t - EPS);
        let hi = self.checkpoints.get(idx)?;
        if (hi.t - t).abs() <= EPS {
            return Some(*hi);
        }
        let lo = if idx == 0 {
            GammaCheckpoint {
                t: self.t_start,
                gamma: UnitQuaternion::identity(),
                jac_bg: Matrix3::zeros(),
            }
        } else {
            self.checkpoints[idx - 1]
        };
        let s = (t - lo.t) / (hi.t - lo.t);
        let step = so3::boxminus(&hi.gamma, &lo.gamma);
        Some(GammaCheckpoint {
            t,
            gamma: so3::boxplus(&lo.gamma, &(step * s)),
            jac_bg: lo.jac_bg + (hi.jac_bg - lo.jac_bg) * s,
        })
    }

    /// Propagates `x_k` through the preintegrated motion; biases are copied.
    pub fn predict_state(&self, x_k: &SystemState, g_w: &Vector3<f64>) -> SystemState {
        let terms = self.corrected(&x_k.bg, &x_k.ba);
        let r0 = x_k.rotation();
        let dt = self.dt_total;
        SystemState {
            t: x_k.t + dt,
            p: x_k.p + x_k.v * dt + 0.5 * g_w * dt * dt + r0 * terms.alpha,
            q: so3::quat_multiply(&x_k.q, &terms.gamma),
            v: x_k.v + g_w * dt + r0 * terms.beta,
            bg: x_k.bg,
            ba: x_k.ba,
        }
    }

    /// Inertial residual `[position, velocity, orientation, dbg, dba]`.
    pub fn inertial_residual(&self, x_k: &SystemState, x_k1: &SystemState, g_w: &Vector3<f64>) -> Vector15 {
        let terms = self.corrected(&x_k.bg, &x_k.ba);
        let rt = x_k.rotation().transpose();
        let dt = self.dt_total;
        let dp = x_k1.p - x_k.p - x_k.v * dt - 0.5 * g_w * dt * dt;
        let dv = x_k1.v - x_k.v - g_w * dt;
        let e = orientation_error(&x_k.q, &x_k1.q, &terms.gamma);

        let mut r = Vector15::zeros();
        use err_idx::*;
        r.fixed_rows_mut::<3>(ALPHA).copy_from(&(rt * dp - terms.alpha));
        r.fixed_rows_mut::<3>(BETA).copy_from(&(rt * dv - terms.beta));
        r.fixed_rows_mut::<3>(THETA).copy_from(&(2.0 * e.imag()));
        r.fixed_rows_mut::<3>(BG).copy_from(&(x_k1.bg - x_k.bg));
        r.fixed_rows_mut::<3>(BA).copy_from(&(x_k1.ba - x_k.ba));
        r
    }

    /// Analytic Jacobians of [`PreintegratedImu::inertial_residual`] w.r.t. the
    /// tangents of `x_k` and `x_k1`.
    pub fn residual_jacobians(&self, x_k: &SystemState, x_k1: &SystemState, g_w: &Vector3<f64>) -> (Matrix15, Matrix15) {
        let dbg = x_k.bg - self.bg_lin;
        let terms = self.corrected(&x_k.bg, &x_k.ba);
        let rt = x_k.rotation().transpose();
        let dt = self.dt_total;
        let dp = x_k1.p - x_k.p - x_k.v * dt - 0.5 * g_w * dt * dt;
        let dv = x_k1.v - x_k.v - g_w * dt;
        let e = orientation_error(&x_k.q, &x_k1.q, &terms.gamma);
        let (we, ve) = (e.w, e.imag());
        let left = Matrix3::identity() * we + skew(&ve);
        let right = Matrix3::identity() * we - skew(&ve);
        let r_gamma = so3::quat_to_matrix(&terms.gamma);
        let jg = self.jac_gamma_bg();
        let jr = so3::right_jacobian(&(jg * dbg));

        let i3 = Matrix3::identity();
        let mut jk = Matrix15::zeros();
        let mut jk1 = Matrix15::zeros();
        use err_idx as e_;
        use state_idx as s_;
        let set = |m: &mut Matrix15, r: usize, c: usize, b: Matrix3<f64>| m.fixed_view_mut::<3, 3>(r, c).copy_from(&b);

        set(&mut jk, e_::ALPHA, s_::P, -rt);
        set(&mut jk, e_::ALPHA, s_::THETA, skew(&(rt * dp)));
        set(&mut jk, e_::ALPHA, s_::V, -rt * dt);
        set(&mut jk, e_::ALPHA, s_::BG, -self.jac_alpha_bg());
        set(&mut jk, e_::ALPHA, s_::BA, -self.jac_alpha_ba());
        set(&mut jk1, e_::ALPHA, s_::P, rt);

        set(&mut jk, e_::BETA, s_::THETA, skew(&(rt * dv)));
        set(&mut jk, e_::BETA, s_::V, -rt);
        set(&mut jk, e_::BETA, s_::BG, -self.jac_beta_bg());
        set(&mut jk, e_::BETA, s_::BA, -self.jac_beta_ba());
        set(&mut jk1, e_::BETA, s_::V, rt);

        set(&mut jk, e_::THETA, s_::THETA, -right);
        set(&mut jk, e_::THETA, s_::BG, -left * r_gamma * jr * jg);
        set(&mut jk1, e_::THETA, s_::THETA, left * r_gamma);

        set(&mut jk, e_::BG, s_::BG, -i3);
        set(&mut jk1, e_::BG, s_::BG, i3);
        set(&mut jk, e_::BA, s_::BA, -i3);
        set(&mut jk1, e_::BA, s_::BA, i3);
        (jk, jk1)
    }
}

/// `q_k^-1 * q_k1 * gamma^-1` in the `w >= 0` hemisphere.
fn orientation_error(q_k: &UnitQuaternion<f64>, q_k1: &UnitQuaternion<f64>, gamma: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let e = q_k.inverse().quaternion() * q_k1.quaternion() * gamma.inverse().quaternion();
    so3::canonical(&e)
}

/// Samples covering `[t0, t1]`, with linearly interpolated end points when
/// `t0` or `t1` fall between samples.
pub fn slice_segment(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    const EPS: f64 = 1e-9;
    let mut out = Vec::new();
    if samples.is_empty() || t1 <= t0 {
        return out;
    }
    let start = samples.partition_point(|s| s.t < t0 - EPS);
    if start < samples.len() && (samples[start].t - t0).abs() > EPS && start > 0 {
        out.push(samples[start - 1].lerp(&samples[start], t0));
    }
    for s in &samples[start..] {
        if s.t > t1 + EPS {
            if let Some(prev) = out.last().copied() {
                if (prev.t - t1).abs() > EPS {
                    out.push(prev.lerp(s, t1));
                }
            }
            break;
        }
        out.push(*s);
    }
    out
}

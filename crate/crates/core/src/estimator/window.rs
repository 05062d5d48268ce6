//! Sliding window of keyframe states with inertial, magnetometer, visual and
//! prior factors.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use super::lm::{self, LmReport, LmSettings, Problem};
use super::OptimizerConfig;
use crate::error::{Error, Result};
use crate::imu::{ImuNoiseParams, ImuSample, Matrix15, PreintegratedImu, SystemState, Vector15};
use crate::mag::{self, MagNoiseParams};
use crate::so3;
use crate::vision::{self, CameraModel, Landmark, Pose};

const STATE_DIM: usize = 15;
/// Relative floor for the Marquardt diagonal scaling.
const DAMPING_FLOOR: f64 = 1e-9;

type Matrix6x3 = SMatrix<f64, 6, 3>;

/// Everything the window needs besides the measurements themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub optimizer: OptimizerConfig,
    pub imu_noise: ImuNoiseParams,
    /// `None` disables magnetometer factors.
    pub mag_noise: Option<MagNoiseParams>,
    pub gravity: Vector3<f64>,
    pub camera: CameraModel,
    pub sigma_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub frame_id: u64,
    pub x: SystemState,
    pub keyframe: bool,
    /// `(track id, pixel)` observations made in this frame.
    pub observations: Vec<(u64, Vector2<f64>)>,
    /// Calibrated magnetometer reading at the frame time.
    pub mag: Option<Vector3<f64>>,
}

/// Calibrated magnetometer sample attached to a consecutive state pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagMeasurement {
    pub t: f64,
    pub m: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct ImuFactor {
    pre: PreintegratedImu,
    info: Matrix15,
}

impl ImuFactor {
    fn new(pre: PreintegratedImu) -> Result<Self> {
        let cov = (pre.cov + pre.cov.transpose()) * 0.5;
        let info = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("preintegration covariance is not positive definite".into()))?
            .inverse();
        Ok(Self { pre, info: (info + info.transpose()) * 0.5 })
    }
}

/// Gaussian prior `||r0 + J0 (x [-] x_lin)||^2` over a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalizationPrior {
    pub frame_ids: Vec<u64>,
    pub linearization_states: Vec<SystemState>,
    pub j0: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl MarginalizationPrior {
    pub fn dim(&self) -> usize {
        self.frame_ids.len() * STATE_DIM
    }

    /// Residual and Jacobian w.r.t. the tangents of `states` (ordered as
    /// `frame_ids`).
    fn evaluate(&self, states: &[&SystemState]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut delta = DVector::zeros(n);
        let mut jac = DMatrix::identity(n, n);
        for (k, (x, lin)) in states.iter().zip(&self.linearization_states).enumerate() {
            let d = x.boxminus(lin);
            delta.rows_mut(k * STATE_DIM, STATE_DIM).copy_from(&d);
            let theta = d.fixed_rows::<3>(3).into_owned();
            jac.view_mut((k * STATE_DIM + 3, k * STATE_DIM + 3), (3, 3))
                .copy_from(&so3::right_jacobian_inv(&theta));
        }
        let r = &self.r0 + &self.j0 * &delta;
        (r, &self.j0 * jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Keyframe,
    Regular,
}

/// Keyframe iff the fraction of the newest keyframe's tracks seen again drops
/// below `min_overlap`, or the predicted translation exceeds `max_translation`.
pub fn keyframe_policy(keyframe_tracks: &[u64], new_tracks: &[u64], translation: f64, min_overlap: f64, max_translation: f64) -> FrameKind {
    let overlap = if keyframe_tracks.is_empty() {
        if new_tracks.is_empty() { 1.0 } else { 0.0 }
    } else {
        let new: BTreeSet<u64> = new_tracks.iter().copied().collect();
        keyframe_tracks.iter().filter(|t| new.contains(t)).count() as f64 / keyframe_tracks.len() as f64
    };
    if overlap < min_overlap || translation > max_translation {
        FrameKind::Keyframe
    } else {
        FrameKind::Regular
    }
}

#[derive(Debug, Clone)]
struct LandmarkBlock {
    id: u64,
    h: Matrix3<f64>,
    b: Vector3<f64>,
    /// `(state index, d^2 cost / d pose d landmark)` for the pose part of each observing state.
    blocks: Vec<(usize, Matrix6x3)>,
}

#[derive(Debug, Clone)]
struct Linearization {
    h: DMatrix<f64>,
    b: DVector<f64>,
    landmarks: Vec<LandmarkBlock>,
}

/// What happened to the oldest state during [`FactorGraphWindow::marginalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Marginalized {
    pub state: WindowState,
    pub landmarks: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct FactorGraphWindow {
    pub config: WindowConfig,
    states: Vec<WindowState>,
    imu: Vec<ImuFactor>,
    mag: Vec<Vec<MagMeasurement>>,
    landmarks: BTreeMap<u64, Landmark>,
    retired: BTreeSet<u64>,
    prior: Option<MarginalizationPrior>,
    lin: Option<Linearization>,
    /// Newest keyframe, kept after it leaves the window.
    last_keyframe: Option<KeyframeRef>,
}

#[derive(Debug, Clone)]
struct KeyframeRef {
    frame_id: u64,
    p: Vector3<f64>,
    tracks: Vec<u64>,
}

impl FactorGraphWindow {
    pub fn new(config: WindowConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
            imu: Vec::new(),
            mag: Vec::new(),
            landmarks: BTreeMap::new(),
            retired: BTreeSet::new(),
            prior: None,
            lin: None,
            last_keyframe: None,
        }
    }

    pub fn states(&self) -> &[WindowState] {
        &self.states
    }

    pub fn landmarks(&self) -> &BTreeMap<u64, Landmark> {
        &self.landmarks
    }

    pub fn prior(&self) -> Option<&MarginalizationPrior> {
        self.prior.as_ref()
    }

    pub fn set_prior(&mut self, prior: MarginalizationPrior) {
        self.prior = Some(prior);
    }

    pub fn preintegration(&self, pair: usize) -> Option<&PreintegratedImu> {
        self.imu.get(pair).map(|f| &f.pre)
    }

    pub fn mag_measurements(&self, pair: usize) -> Option<&[MagMeasurement]> {
        self.mag.get(pair).map(|v| v.as_slice())
    }

    pub fn newest(&self) -> Option<&WindowState> {
        self.states.last()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.optimizer.m_kf + self.config.optimizer.m_recent
    }

    /// Overwrites state estimates, e.g. to start from ground truth.
    pub fn set_state(&mut self, index: usize, x: SystemState) {
        self.states[index].x = x;
    }

    pub fn set_landmark(&mut self, id: u64, l_w: Vector3<f64>) {
        self.landmarks.insert(id, Landmark::new(id, l_w));
    }

    /// First state of the window. Its pose and motion are anchored by
    /// `prior`.
    pub fn bootstrap(&mut self, frame_id: u64, x: SystemState, observations: Vec<(u64, Vector2<f64>)>, mag: Option<Vector3<f64>>, prior: MarginalizationPrior) -> Result<()> {
        if !self.states.is_empty() {
            return Err(Error::Ordering("window already initialized".into()));
        }
        self.last_keyframe = Some(KeyframeRef { frame_id, p: x.p, tracks: observations.iter().map(|o| o.0).collect() });
        self.states.push(WindowState { frame_id, x, keyframe: true, observations, mag });
        self.prior = Some(prior);
        Ok(())
    }

    /// Appends a frame: predicts its state through the IMU segment, attaches
    /// inertial and magnetometer factors, decides its keyframe status and
    /// triangulates newly observable tracks.
    pub fn add_frame(
        &mut self,
        frame_id: u64,
        imu_segment: &[ImuSample],
        mag_segment: &[MagMeasurement],
        mag_at_frame: Option<Vector3<f64>>,
        observations: Vec<(u64, Vector2<f64>)>,
    ) -> Result<FrameKind> {
        let newest = self.states.last().ok_or_else(|| Error::Ordering("add_frame before bootstrap".into()))?;
        let (first, last) = match (imu_segment.first(), imu_segment.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::TooFewSamples { needed: 2, got: 0 }),
        };
        if (first.t - newest.x.t).abs() > 1e-9 || last.t <= newest.x.t {
            return Err(Error::Ordering(format!(
                "frame at t = {} does not follow the newest state at t = {}",
                last.t, newest.x.t
            )));
        }
        let pre = PreintegratedImu::from_samples(imu_segment, newest.x.bg, newest.x.ba, self.config.imu_noise)?;
        let mut x = pre.predict_state(&newest.x, &self.config.gravity);
        x.t = last.t;

        let kf = self.last_keyframe.as_ref().ok_or_else(|| Error::Ordering("add_frame before bootstrap".into()))?;
        let kf_p = self.states.iter().find(|s| s.frame_id == kf.frame_id).map_or(kf.p, |s| s.x.p);
        let new_tracks: Vec<u64> = observations.iter().map(|o| o.0).collect();
        let opt = &self.config.optimizer;
        let kind = keyframe_policy(&kf.tracks, &new_tracks, (x.p - kf_p).norm(), opt.keyframe_overlap, opt.keyframe_translation);
        if kind == FrameKind::Keyframe {
            self.last_keyframe = Some(KeyframeRef { frame_id, p: x.p, tracks: new_tracks });
        }

        let t0 = newest.x.t;
        let mags: Vec<MagMeasurement> = if self.config.mag_noise.is_some() && mag_at_frame.is_some() {
            mag_segment
                .iter()
                .filter(|m| m.t > t0 + 1e-9 && m.t <= x.t + 1e-9)
                .step_by(opt.mag_stride.max(1))
                .copied()
                .collect()
        } else {
            Vec::new()
        };

        self.imu.push(ImuFactor::new(pre)?);
        self.mag.push(mags);
        self.states.push(WindowState {
            frame_id,
            x,
            keyframe: kind == FrameKind::Keyframe,
            observations,
            mag: mag_at_frame,
        });
        self.lin = None;
        self.triangulate_new_tracks();
        self.drop_unobserved_landmarks();
        Ok(kind)
    }

    fn triangulate_new_tracks(&mut self) {
        let Some(newest) = self.states.last() else { return };
        let cam = self.config.camera;
        let min_angle = self.config.optimizer.min_triangulation_angle_deg.to_radians();
        let mut new_landmarks = Vec::new();
        for &(track, _) in &newest.observations {
            if self.landmarks.contains_key(&track) || self.retired.contains(&track) {
                continue;
            }
            let views: Vec<(Pose, Vector2<f64>)> = self
                .states
                .iter()
                .filter_map(|s| s.observations.iter().find(|o| o.0 == track).map(|o| (Pose::new(s.x.p, s.x.q), o.1)))
                .collect();
            if views.len() < 2 {
                continue;
            }
            let (first, last) = (&views[0], &views[views.len() - 1]);
            let d0 = cam.world_ray(&first.0, &first.1).1;
            let d1 = cam.world_ray(&last.0, &last.1).1;
            if d0.dot(&d1).clamp(-1.0, 1.0).acos() < min_angle {
                continue;
            }
            if let Ok(tri) = vision::triangulate(&views, &cam) {
                if !tri.low_quality {
                    new_landmarks.push(Landmark::new(track, tri.point));
                }
            }
        }
        for lm in new_landmarks {
            self.landmarks.insert(lm.id, lm);
        }
    }

    fn observation_count(&self) -> BTreeMap<u64, usize> {
        let mut count = BTreeMap::new();
        for s in &self.states {
            for (track, _) in &s.observations {
                if self.landmarks.contains_key(track) {
                    *count.entry(*track).or_insert(0) += 1;
                }
            }
        }
        count
    }

    fn drop_unobserved_landmarks(&mut self) {
        let count = self.observation_count();
        let gone: Vec<u64> = self.landmarks.keys().filter(|id| !count.contains_key(id)).copied().collect();
        for id in gone {
            self.landmarks.remove(&id);
        }
    }

    /// Removes landmarks that end up behind a camera or reproject further than
    /// `max_error_px` in some view.
    pub fn prune_landmarks(&mut self, max_error_px: f64) -> usize {
        let cam = self.config.camera;
        let mut bad = Vec::new();
        for (id, lm) in &self.landmarks {
            let ok = self.states.iter().all(|s| {
                s.observations.iter().filter(|o| o.0 == *id).all(|o| match cam.project(&Pose::new(s.x.p, s.x.q), &lm.l_w) {
                    Ok(uv) => (uv - o.1).norm() <= max_error_px,
                    Err(_) => false,
                })
            });
            if !ok {
                bad.push(*id);
            }
        }
        for id in &bad {
            self.landmarks.remove(id);
            self.retired.insert(*id);
        }
        bad.len()
    }

    pub fn optimize(&mut self) -> Result<LmReport> {
        if self.states.len() < 2 {
            return Ok(LmReport::default());
        }
        let o = &self.config.optimizer;
        let settings = LmSettings {
            max_iterations: o.max_iterations,
            initial_lambda: o.lm_initial_lambda,
            lambda_min: o.lm_lambda_bounds.0,
            lambda_max: o.lm_lambda_bounds.1,
            convergence_tol: o.convergence_tol,
            min_step: o.min_step,
        };
        let report = lm::levenberg_marquardt(self, &settings)?;
        self.lin = None;
        Ok(report)
    }

    /// Bias-corrected `gamma_k^j` and its bias Jacobian for a magnetometer
    /// sample of pair `k`.
    fn mag_terms(&self, k: usize, t: f64) -> Option<(nalgebra::UnitQuaternion<f64>, Matrix3<f64>, Vector3<f64>)> {
        let pre = &self.imu[k].pre;
        let cp = pre.gamma_at(t)?;
        let dbg = self.states[k].x.bg - pre.bg_lin;
        Some((so3::boxplus(&cp.gamma, &(cp.jac_bg * dbg)), cp.jac_bg, dbg))
    }

    fn mag_weight(&self) -> f64 {
        self.config.mag_noise.map(|n| mag::mag_weight(&n)[(0, 0)]).unwrap_or(0.0)
    }

    /// Total cost at the current estimate.
    pub fn total_cost(&self) -> Result<f64> {
        let mut cost = 0.0;
        let check = |c: f64, factor: String| -> Result<f64> {
            if c.is_finite() {
                Ok(c)
            } else {
                Err(Error::NonFiniteCost { factor, detail: format!("cost {c}") })
            }
        };
        if let Some(prior) = &self.prior {
            let states = self.prior_states(prior)?;
            let (r, _) = prior.evaluate(&states);
            cost += check(0.5 * r.norm_squared(), "prior".into())?;
        }
        for (k, f) in self.imu.iter().enumerate() {
            let r = f.pre.inertial_residual(&self.states[k].x, &self.states[k + 1].x, &self.config.gravity);
            cost += check(0.5 * (r.transpose() * f.info * r)[0], format!("imu {}-{}", self.states[k].frame_id, self.states[k + 1].frame_id))?;
        }
        let w = self.mag_weight();
        for (k, ms) in self.mag.iter().enumerate() {
            let Some(m_k1) = self.states[k + 1].mag else { continue };
            for m in ms {
                let Some((gamma, _, _)) = self.mag_terms(k, m.t) else { continue };
                let e = mag::mag_residual(&gamma, &self.states[k].x.q, &self.states[k + 1].x.q, &m.m, &m_k1);
                cost += check(0.5 * w * e.norm_squared(), format!("mag {} at t = {}", self.states[k].frame_id, m.t))?;
            }
        }
        let cam = &self.config.camera;
        let active = self.observation_count();
        let k = self.config.optimizer.huber_threshold_px;
        let info = 1.0 / (self.config.sigma_px * self.config.sigma_px);
        for s in &self.states {
            let pose = Pose::new(s.x.p, s.x.q);
            for (track, uv) in &s.observations {
                let Some(lm) = self.landmarks.get(track).filter(|_| active.get(track).is_some_and(|&c| c >= 2)) else { continue };
                let Ok(p) = cam.project(&pose, &lm.l_w) else { continue };
                cost += check(info * vision::huber_loss((p - uv).norm(), k), format!("visual frame {} track {}", s.frame_id, track))?;
            }
        }
        Ok(cost)
    }

    fn prior_states<'a>(&'a self, prior: &MarginalizationPrior) -> Result<Vec<&'a SystemState>> {
        prior
            .frame_ids
            .iter()
            .map(|id| {
                self.states
                    .iter()
                    .find(|s| s.frame_id == *id)
                    .map(|s| &s.x)
                    .ok_or_else(|| Error::Numerical(format!("prior references missing frame {id}")))
            })
            .collect()
    }

    fn state_index(&self, frame_id: u64) -> Option<usize> {
        self.states.iter().position(|s| s.frame_id == frame_id)
    }

    /// Repropagates preintegrations whose bias moved past the thresholds.
    fn refresh_preintegration(&mut self) -> Result<()> {
        let thresholds = self.config.optimizer.thresholds;
        for k in 0..self.imu.len() {
            let x = &self.states[k].x;
            if let Err(Error::RepropagationRequired { .. }) = self.imu[k].pre.bias_correct(&x.bg, &x.ba, &thresholds) {
                let pre = self.imu[k].pre.repropagate(x.bg, x.ba)?;
                self.imu[k] = ImuFactor::new(pre)?;
            }
        }
        Ok(())
    }

    fn build_normal_equations(&self) -> Result<Linearization> {
        let n = self.states.len() * STATE_DIM;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);

        if let Some(prior) = &self.prior {
            let states = self.prior_states(prior)?;
            let (r, j) = prior.evaluate(&states);
            let idx: Vec<usize> = prior.frame_ids.iter().map(|id| self.state_index(*id).unwrap()).collect();
            let jtj = j.transpose() * &j;
            let jtr = j.transpose() * r;
            for (a, &ia) in idx.iter().enumerate() {
                b.rows_mut(ia * STATE_DIM, STATE_DIM).add_assign(&jtr.rows(a * STATE_DIM, STATE_DIM));
                for (c, &ic) in idx.iter().enumerate() {
                    let blk = jtj.view((a * STATE_DIM, c * STATE_DIM), (STATE_DIM, STATE_DIM));
                    let mut dst = h.view_mut((ia * STATE_DIM, ic * STATE_DIM), (STATE_DIM, STATE_DIM));
                    dst += blk;
                }
            }
        }

        for (k, f) in self.imu.iter().enumerate() {
            let (xk, xk1) = (&self.states[k].x, &self.states[k + 1].x);
            let r = f.pre.inertial_residual(xk, xk1, &self.config.gravity);
            let (jk, jk1) = f.pre.residual_jacobians(xk, xk1, &self.config.gravity);
            let wjk = f.info * jk;
            let wjk1 = f.info * jk1;
            let (o0, o1) = (k * STATE_DIM, (k + 1) * STATE_DIM);
            let mut add = |r0: usize, c0: usize, m: Matrix15| {
                let mut v = h.fixed_view_mut::<15, 15>(r0, c0);
                v += m;
            };
            add(o0, o0, jk.transpose() * wjk);
            add(o0, o1, jk.transpose() * wjk1);
            add(o1, o0, jk1.transpose() * wjk);
            add(o1, o1, jk1.transpose() * wjk1);
            let wr: Vector15 = f.info * r;
            b.fixed_rows_mut::<15>(o0).add_assign(&(jk.transpose() * wr));
            b.fixed_rows_mut::<15>(o1).add_assign(&(jk1.transpose() * wr));
        }

        let w = self.mag_weight();
        for (k, ms) in self.mag.iter().enumerate() {
            let Some(m_k1) = self.states[k + 1].mag else { continue };
            let (qk, qk1) = (self.states[k].x.q, self.states[k + 1].x.q);
            // columns: theta_k, bg_k, theta_k1
            let cols = [k * STATE_DIM + 3, k * STATE_DIM + 9, (k + 1) * STATE_DIM + 3];
            for m in ms {
                let Some((gamma, jac_bg, dbg)) = self.mag_terms(k, m.t) else { continue };
                let e = mag::mag_residual(&gamma, &qk, &qk1, &m.m, &m_k1);
                let j = mag::mag_residual_jacobians(&gamma, &jac_bg, &dbg, &qk, &qk1, &m.m, &m_k1);
                let blocks = [j.d_theta_k, j.d_bg, j.d_theta_k1];
                for (a, ja) in blocks.iter().enumerate() {
                    b.fixed_rows_mut::<3>(cols[a]).add_assign(&(ja.transpose() * e * w));
                    for (c, jc) in blocks.iter().enumerate() {
                        let mut v = h.fixed_view_mut::<3, 3>(cols[a], cols[c]);
                        v += ja.transpose() * jc * w;
                    }
                }
            }
        }

        let cam = &self.config.camera;
        let active = self.observation_count();
        let huber = self.config.optimizer.huber_threshold_px;
        let info = 1.0 / (self.config.sigma_px * self.config.sigma_px);
        let mut blocks: BTreeMap<u64, LandmarkBlock> = BTreeMap::new();
        for (i, s) in self.states.iter().enumerate() {
            let pose = Pose::new(s.x.p, s.x.q);
            let o = i * STATE_DIM;
            for (track, uv) in &s.observations {
                let Some(lm) = self.landmarks.get(track).filter(|_| active.get(track).is_some_and(|&c| c >= 2)) else { continue };
                let Ok(p) = cam.project(&pose, &lm.l_w) else { continue };
                let Ok(j) = vision::reprojection_jacobians(cam, &pose, &lm.l_w) else { continue };
                let r = p - uv;
                let wt = info * vision::huber_weight(r.norm(), huber);
                let jp = j.d_pose;
                let jl = j.d_landmark;
                let mut v = h.fixed_view_mut::<6, 6>(o, o);
                v += jp.transpose() * jp * wt;
                b.fixed_rows_mut::<6>(o).add_assign(&(jp.transpose() * r * wt));
                let blk = blocks.entry(*track).or_insert_with(|| LandmarkBlock {
                    id: *track,
                    h: Matrix3::zeros(),
                    b: Vector3::zeros(),
                    blocks: Vec::new(),
                });
                blk.h += jl.transpose() * jl * wt;
                blk.b += jl.transpose() * r * wt;
                blk.blocks.push((i, jp.transpose() * jl * wt));
            }
        }
        Ok(Linearization { h, b, landmarks: blocks.into_values().collect() })
    }

    /// Keeps at most `m_recent` recent frames plus `m_kf` older keyframes.
    ///
    /// A regular frame leaving the recent set loses its visual measurements
    /// and its inertial segment is merged into its neighbours' factor. When
    /// the keyframe set overflows, the oldest keyframe is marginalized with
    /// the landmarks it sees that the newest keyframe does not.
    pub fn marginalize(&mut self) -> Result<Option<Marginalized>> {
        let o = &self.config.optimizer;
        let (m_kf, m_recent) = (o.m_kf, o.m_recent);
        let n = self.states.len();
        if n > m_recent + 1 {
            let i = n - m_recent - 1;
            if i > 0 && !self.states[i].keyframe {
                self.merge_state(i)?;
            }
        }
        let old_kf = self.states.len().saturating_sub(m_recent);
        if old_kf <= m_kf || self.states.len() < 2 {
            return Ok(None);
        }
        let newest_kf = self.states.iter().skip(1).rev().find(|s| s.keyframe);
        let seen_newest: BTreeSet<u64> = newest_kf.map(|s| s.observations.iter().map(|o| o.0).collect()).unwrap_or_default();
        let mut marg_landmarks: Vec<u64> = self.states[0]
            .observations
            .iter()
            .map(|o| o.0)
            .filter(|id| self.landmarks.contains_key(id) && !seen_newest.contains(id))
            .collect();
        marg_landmarks.sort_unstable();
        marg_landmarks.dedup();
        // Regular frames would drop these measurements later anyway.
        for s in self.states.iter_mut().skip(1).filter(|s| !s.keyframe) {
            s.observations.retain(|o| marg_landmarks.binary_search(&o.0).is_err());
        }
        self.marginalize_oldest_with(&marg_landmarks)?;
        let state = self.states.remove(0);
        self.imu.remove(0);
        self.mag.remove(0);
        for id in &marg_landmarks {
            self.landmarks.remove(id);
            self.retired.insert(*id);
        }
        self.drop_unobserved_landmarks();
        self.lin = None;
        Ok(Some(Marginalized { state, landmarks: marg_landmarks }))
    }

    /// Removes regular state `i`, joining the inertial factors on both sides.
    fn merge_state(&mut self, i: usize) -> Result<()> {
        if let Some(prior) = &self.prior {
            if prior.frame_ids.contains(&self.states[i].frame_id) {
                return Err(Error::Numerical(format!("frame {} is held by the prior", self.states[i].frame_id)));
            }
        }
        let mut samples = self.imu[i - 1].pre.samples().to_vec();
        samples.extend_from_slice(&self.imu[i].pre.samples()[1..]);
        let x = &self.states[i - 1].x;
        let pre = PreintegratedImu::from_samples(&samples, x.bg, x.ba, self.config.imu_noise)?;
        self.imu[i - 1] = ImuFactor::new(pre)?;
        self.imu.remove(i);
        let tail = self.mag.remove(i);
        self.mag[i - 1].extend(tail);
        self.states.remove(i);
        self.drop_unobserved_landmarks();
        self.lin = None;
        Ok(())
    }

    /// Replaces the prior by the Schur complement of the factors touching the
    /// oldest state and `landmarks`.
    fn marginalize_oldest_with(&mut self, landmarks: &[u64]) -> Result<()> {
        // Local ordering: oldest state, landmarks, then retained states.
        let mut retained: BTreeSet<usize> = BTreeSet::new();
        retained.insert(1);
        if let Some(prior) = &self.prior {
            for id in &prior.frame_ids {
                let i = self.state_index(*id).ok_or_else(|| Error::Numerical(format!("prior references missing frame {id}")))?;
                if i != 0 {
                    retained.insert(i);
                }
            }
        }
        for (i, s) in self.states.iter().enumerate().skip(1) {
            if s.observations.iter().any(|o| landmarks.contains(&o.0)) {
                retained.insert(i);
            }
        }
        let retained: Vec<usize> = retained.into_iter().collect();
        let n_m = STATE_DIM + 3 * landmarks.len();
        let n = n_m + STATE_DIM * retained.len();
        let state_off = |i: usize| -> usize {
            if i == 0 {
                0
            } else {
                n_m + STATE_DIM * retained.iter().position(|&r| r == i).unwrap()
            }
        };
        let lm_off = |id: u64| STATE_DIM + 3 * landmarks.iter().position(|&l| l == id).unwrap();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);

        if let Some(prior) = &self.prior {
            let states = self.prior_states(prior)?;
            let (r, j) = prior.evaluate(&states);
            let offs: Vec<usize> = prior.frame_ids.iter().map(|id| state_off(self.state_index(*id).unwrap())).collect();
            let jtj = j.transpose() * &j;
            let jtr = j.transpose() * r;
            for (a, &oa) in offs.iter().enumerate() {
                b.rows_mut(oa, STATE_DIM).add_assign(&jtr.rows(a * STATE_DIM, STATE_DIM));
                for (c, &oc) in offs.iter().enumerate() {
                    let mut v = h.view_mut((oa, oc), (STATE_DIM, STATE_DIM));
                    v += jtj.view((a * STATE_DIM, c * STATE_DIM), (STATE_DIM, STATE_DIM));
                }
            }
        }

        {
            let f = &self.imu[0];
            let (x0, x1) = (&self.states[0].x, &self.states[1].x);
            let r = f.pre.inertial_residual(x0, x1, &self.config.gravity);
            let (j0, j1) = f.pre.residual_jacobians(x0, x1, &self.config.gravity);
            let mut jac = DMatrix::<f64>::zeros(STATE_DIM, n);
            jac.view_mut((0, state_off(0)), (15, 15)).copy_from(&j0);
            jac.view_mut((0, state_off(1)), (15, 15)).copy_from(&j1);
            let info = DMatrix::from_iterator(15, 15, f.info.iter().copied());
            let wj = &info * &jac;
            h += jac.transpose() * &wj;
            b += wj.transpose() * DVector::from_iterator(15, r.iter().copied());
        }

        let w = self.mag_weight();
        if let Some(m_k1) = self.states[1].mag {
            let (q0, q1) = (self.states[0].x.q, self.states[1].x.q);
            let cols = [state_off(0) + 3, state_off(0) + 9, state_off(1) + 3];
            for m in &self.mag[0] {
                let Some((gamma, jac_bg, dbg)) = self.mag_terms(0, m.t) else { continue };
                let e = mag::mag_residual(&gamma, &q0, &q1, &m.m, &m_k1);
                let j = mag::mag_residual_jacobians(&gamma, &jac_bg, &dbg, &q0, &q1, &m.m, &m_k1);
                let blocks = [j.d_theta_k, j.d_bg, j.d_theta_k1];
                for (a, ja) in blocks.iter().enumerate() {
                    b.fixed_rows_mut::<3>(cols[a]).add_assign(&(ja.transpose() * e * w));
                    for (c, jc) in blocks.iter().enumerate() {
                        let mut v = h.fixed_view_mut::<3, 3>(cols[a], cols[c]);
                        v += ja.transpose() * jc * w;
                    }
                }
            }
        }

        let cam = &self.config.camera;
        let huber = self.config.optimizer.huber_threshold_px;
        let info = 1.0 / (self.config.sigma_px * self.config.sigma_px);
        for (i, s) in self.states.iter().enumerate() {
            let pose = Pose::new(s.x.p, s.x.q);
            for (track, uv) in &s.observations {
                if !landmarks.contains(track) {
                    continue;
                }
                let lm = &self.landmarks[track];
                let Ok(p) = cam.project(&pose, &lm.l_w) else { continue };
                let Ok(j) = vision::reprojection_jacobians(cam, &pose, &lm.l_w) else { continue };
                let r = p - uv;
                let wt = info * vision::huber_weight(r.norm(), huber);
                let (op, ol) = (state_off(i), lm_off(*track));
                let (jp, jl) = (j.d_pose, j.d_landmark);
                let mut v = h.fixed_view_mut::<6, 6>(op, op);
                v += jp.transpose() * jp * wt;
                let mut v = h.fixed_view_mut::<6, 3>(op, ol);
                v += jp.transpose() * jl * wt;
                let mut v = h.fixed_view_mut::<3, 6>(ol, op);
                v += jl.transpose() * jp * wt;
                let mut v = h.fixed_view_mut::<3, 3>(ol, ol);
                v += jl.transpose() * jl * wt;
                b.fixed_rows_mut::<6>(op).add_assign(&(jp.transpose() * r * wt));
                b.fixed_rows_mut::<3>(ol).add_assign(&(jl.transpose() * r * wt));
            }
        }

        let marg: Vec<usize> = (0..n_m).collect();
        let keep: Vec<usize> = (n_m..n).collect();
        let (h_new, b_new) = lm::schur_complement(&h, &b, &marg, &keep);
        let (j0, r0) = lm::prior_from_information(&h_new, &b_new);
        self.prior = Some(MarginalizationPrior {
            frame_ids: retained.iter().map(|&i| self.states[i].frame_id).collect(),
            linearization_states: retained.iter().map(|&i| self.states[i].x).collect(),
            j0,
            r0,
        });
        Ok(())
    }
}

trait AddAssignExt<T> {
    fn add_assign(&mut self, other: &T);
}

impl<'a, R: nalgebra::Dim, C: nalgebra::Dim, RS: nalgebra::Dim, CS: nalgebra::Dim, M> AddAssignExt<M> for nalgebra::Matrix<f64, R, C, nalgebra::ViewStorageMut<'a, f64, R, C, RS, CS>>
where
    for<'b> nalgebra::Matrix<f64, R, C, nalgebra::ViewStorageMut<'a, f64, R, C, RS, CS>>: std::ops::AddAssign<&'b M>,
{
    fn add_assign(&mut self, other: &M) {
        *self += other;
    }
}

#[derive(Debug, Clone)]
pub struct WindowSnapshot {
    states: Vec<SystemState>,
    landmarks: Vec<(u64, Vector3<f64>)>,
}

impl Problem for FactorGraphWindow {
    type Snapshot = WindowSnapshot;

    fn cost(&mut self) -> Result<f64> {
        self.total_cost()
    }

    fn linearize(&mut self) -> Result<f64> {
        self.refresh_preintegration()?;
        self.lin = Some(self.build_normal_equations()?);
        self.total_cost()
    }

    fn solve(&mut self, lambda: f64) -> Result<DVector<f64>> {
        let lin = self.lin.as_ref().ok_or_else(|| Error::Numerical("solve before linearize".into()))?;
        let ns = lin.h.nrows();
        let mut s = lin.h.clone();
        for i in 0..ns {
            s[(i, i)] += lambda * s[(i, i)].max(DAMPING_FLOOR);
        }
        let mut rhs = -lin.b.clone();
        let mut inverses = Vec::with_capacity(lin.landmarks.len());
        for lm in &lin.landmarks {
            let mut hll = lm.h;
            for i in 0..3 {
                hll[(i, i)] += lambda * hll[(i, i)].max(DAMPING_FLOOR);
            }
            let inv = hll
                .try_inverse()
                .ok_or_else(|| Error::Numerical(format!("landmark {} block is singular", lm.id)))?;
            for (a, ha) in &lm.blocks {
                let hai = ha * inv;
                let mut r = rhs.fixed_rows_mut::<6>(a * STATE_DIM);
                r += hai * lm.b;
                for (c, hc) in &lm.blocks {
                    let mut v = s.fixed_view_mut::<6, 6>(a * STATE_DIM, c * STATE_DIM);
                    v -= hai * hc.transpose();
                }
            }
            inverses.push(inv);
        }
        let ds = lm::solve_spd(&s, &rhs)?;
        let mut dx = DVector::zeros(ns + 3 * lin.landmarks.len());
        dx.rows_mut(0, ns).copy_from(&ds);
        for (k, (lm, inv)) in lin.landmarks.iter().zip(&inverses).enumerate() {
            let mut rhs_l = -lm.b;
            for (a, ha) in &lm.blocks {
                rhs_l -= ha.transpose() * ds.fixed_rows::<6>(a * STATE_DIM);
            }
            dx.fixed_rows_mut::<3>(ns + 3 * k).copy_from(&(inv * rhs_l));
        }
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite step".into()));
        }
        Ok(dx)
    }

    fn apply(&mut self, dx: &DVector<f64>) {
        let Some(lin) = self.lin.as_ref() else { return };
        let ns = self.states.len() * STATE_DIM;
        for (i, s) in self.states.iter_mut().enumerate() {
            let d: Vector15 = dx.fixed_rows::<15>(i * STATE_DIM).into_owned();
            s.x = s.x.boxplus(&d);
        }
        for (k, blk) in lin.landmarks.iter().enumerate() {
            if let Some(lm) = self.landmarks.get_mut(&blk.id) {
                lm.l_w += dx.fixed_rows::<3>(ns + 3 * k);
            }
        }
    }

    fn snapshot(&self) -> WindowSnapshot {
        WindowSnapshot {
            states: self.states.iter().map(|s| s.x).collect(),
            landmarks: self.landmarks.iter().map(|(id, l)| (*id, l.l_w)).collect(),
        }
    }

    fn restore(&mut self, snapshot: WindowSnapshot) {
        for (s, x) in self.states.iter_mut().zip(snapshot.states) {
            s.x = x;
        }
        for (id, l) in snapshot.landmarks {
            if let Some(lm) = self.landmarks.get_mut(&id) {
                lm.l_w = l;
            }
        }
    }
}

//! Analytic ground-truth trajectories with closed-form derivatives.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::so3;
use crate::vision::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Horizontal circle about the origin, heading along the tangent, with
    /// optional vertical and roll/pitch oscillation.
    Circle {
        radius: f64,
        rate: f64,
        height_amp: f64,
        height_freq: f64,
        roll_amp: f64,
        pitch_amp: f64,
        wobble_freq: f64,
    },
    /// `p_i = amp_i sin(freq_i tau)` with an oscillating yaw.
    Lissajous {
        amp: Vector3<f64>,
        freq: Vector3<f64>,
        yaw_amp: f64,
        yaw_freq: f64,
    },
    Stationary {
        yaw: f64,
    },
    /// Fixed position, orientation sweeping through all attitudes.
    Tumble {
        yaw_rate: f64,
        pitch_freq: f64,
        roll_rate: f64,
    },
}

impl TrajectoryKind {
    pub fn circle(radius: f64, rate: f64) -> Self {
        TrajectoryKind::Circle {
            radius,
            rate,
            height_amp: 0.0,
            height_freq: 0.0,
            roll_amp: 0.0,
            pitch_amp: 0.0,
            wobble_freq: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::Circle { .. } => "circle",
            TrajectoryKind::Lissajous { .. } => "lissajous",
            TrajectoryKind::Stationary { .. } => "stationary",
            TrajectoryKind::Tumble { .. } => "tumble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryModel {
    pub kind: TrajectoryKind,
    pub duration: f64,
    /// Stationary interval at the start, seconds.
    pub lead_in: f64,
    /// Smooth speed-up after the lead-in, seconds.
    pub ramp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub pose: Pose,
    pub v_w: Vector3<f64>,
    pub a_w: Vector3<f64>,
    pub omega_b: Vector3<f64>,
}

/// Value and first two derivatives of a scalar function of time.
#[derive(Debug, Clone, Copy, Default)]
struct Jet {
    f: f64,
    d1: f64,
    d2: f64,
}

impl Jet {
    fn constant(f: f64) -> Self {
        Jet { f, d1: 0.0, d2: 0.0 }
    }

    fn scale(self, s: f64) -> Self {
        Jet { f: self.f * s, d1: self.d1 * s, d2: self.d2 * s }
    }

    fn add(self, o: Jet) -> Self {
        Jet { f: self.f + o.f, d1: self.d1 + o.d1, d2: self.d2 + o.d2 }
    }

    fn mul(self, o: Jet) -> Self {
        Jet {
            f: self.f * o.f,
            d1: self.d1 * o.f + self.f * o.d1,
            d2: self.d2 * o.f + 2.0 * self.d1 * o.d1 + self.f * o.d2,
        }
    }

    fn sin(self) -> Self {
        let (s, c) = self.f.sin_cos();
        Jet { f: s, d1: c * self.d1, d2: c * self.d2 - s * self.d1 * self.d1 }
    }

    fn cos(self) -> Self {
        let (s, c) = self.f.sin_cos();
        Jet { f: c, d1: -s * self.d1, d2: -s * self.d2 - c * self.d1 * self.d1 }
    }
}

impl TrajectoryModel {
    pub fn new(kind: TrajectoryKind, duration: f64) -> Self {
        Self { kind, duration, lead_in: 0.0, ramp: 0.0 }
    }

    pub fn with_lead_in(mut self, lead_in: f64, ramp: f64) -> Self {
        self.lead_in = lead_in;
        self.ramp = ramp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || self.lead_in < 0.0 || self.ramp < 0.0 {
            return Err(Error::Config("trajectory duration must be positive, lead-in and ramp non-negative".into()));
        }
        if self.lead_in + self.ramp > self.duration {
            return Err(Error::Config("lead-in and ramp exceed the trajectory duration".into()));
        }
        Ok(())
    }

    /// Motion envelope in [0, 1]: zero during the lead-in, a quintic
    /// smoothstep over the ramp, one afterwards.
    fn envelope(&self, t: f64) -> Jet {
        if t <= self.lead_in {
            return if self.ramp == 0.0 && self.lead_in == 0.0 { Jet::constant(1.0) } else { Jet::constant(0.0) };
        }
        if self.ramp == 0.0 || t >= self.lead_in + self.ramp {
            return Jet::constant(1.0);
        }
        let x = (t - self.lead_in) / self.ramp;
        let r = self.ramp;
        Jet {
            f: x * x * x * (10.0 - 15.0 * x + 6.0 * x * x),
            d1: 30.0 * x * x * (1.0 - x) * (1.0 - x) / r,
            d2: 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x) / (r * r),
        }
    }

    /// Warped time `tau` with `tau' = envelope`.
    fn warped_time(&self, t: f64) -> Jet {
        let e = self.envelope(t);
        let f = if t <= self.lead_in {
            if self.lead_in == 0.0 && self.ramp == 0.0 { t } else { 0.0 }
        } else if self.ramp == 0.0 {
            t - self.lead_in
        } else if t < self.lead_in + self.ramp {
            let x = (t - self.lead_in) / self.ramp;
            self.ramp * x.powi(4) * (2.5 - 3.0 * x + x * x)
        } else {
            0.5 * self.ramp + (t - self.lead_in - self.ramp)
        };
        Jet { f, d1: e.f, d2: e.d1 }
    }

    /// `amp * envelope(t) * sin(freq t)`
    fn modulated(&self, t: f64, amp: f64, freq: f64) -> Jet {
        if amp == 0.0 {
            return Jet::default();
        }
        let s = Jet { f: freq * t, d1: freq, d2: 0.0 }.sin();
        self.envelope(t).mul(s).scale(amp)
    }

    /// Position and yaw/pitch/roll as functions of time.
    fn jets(&self, t: f64) -> ([Jet; 3], [Jet; 3]) {
        let tau = self.warped_time(t);
        match self.kind {
            TrajectoryKind::Circle { radius, rate, height_amp, height_freq, roll_amp, pitch_amp, wobble_freq } => {
                let phi = tau.scale(rate);
                let pos = [phi.cos().scale(radius), phi.sin().scale(radius), self.modulated(t, height_amp, height_freq)];
                let yaw = phi.add(Jet::constant(if rate >= 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 }));
                let pitch = self.modulated(t, pitch_amp, wobble_freq);
                let roll = self.modulated(t, roll_amp, 1.3 * wobble_freq);
                (pos, [yaw, pitch, roll])
            }
            TrajectoryKind::Lissajous { amp, freq, yaw_amp, yaw_freq } => {
                let pos = [0, 1, 2].map(|i| tau.scale(freq[i]).sin().scale(amp[i]));
                let yaw = tau.scale(yaw_freq).sin().scale(yaw_amp);
                (pos, [yaw, Jet::default(), Jet::default()])
            }
            TrajectoryKind::Stationary { yaw } => ([Jet::default(); 3], [Jet::constant(yaw), Jet::default(), Jet::default()]),
            TrajectoryKind::Tumble { yaw_rate, pitch_freq, roll_rate } => {
                let yaw = tau.scale(yaw_rate);
                let pitch = tau.scale(pitch_freq).sin().scale(1.2);
                let roll = tau.scale(roll_rate);
                ([Jet::default(); 3], [yaw, pitch, roll])
            }
        }
    }

    pub fn ground_truth(&self, t: f64) -> Result<GroundTruth> {
        if !(0.0..=self.duration + 1e-9).contains(&t) {
            return Err(Error::TimeOutOfRange { t, duration: self.duration });
        }
        let (pos, [yaw, pitch, roll]) = self.jets(t);
        let r = euler_zyx(yaw.f, pitch.f, roll.f);
        let (sr, cr) = roll.f.sin_cos();
        let (sp, cp) = pitch.f.sin_cos();
        let omega_b = Vector3::new(
            roll.d1 - yaw.d1 * sp,
            pitch.d1 * cr + yaw.d1 * cp * sr,
            -pitch.d1 * sr + yaw.d1 * cp * cr,
        );
        Ok(GroundTruth {
            pose: Pose::new(Vector3::new(pos[0].f, pos[1].f, pos[2].f), so3::matrix_to_quat(&r)),
            v_w: Vector3::new(pos[0].d1, pos[1].d1, pos[2].d1),
            a_w: Vector3::new(pos[0].d2, pos[1].d2, pos[2].d2),
            omega_b,
        })
    }

    /// Path length of the position curve, by fine sampling.
    pub fn path_length(&self) -> f64 {
        let n = ((self.duration * 100.0).ceil() as usize).max(1);
        let mut len = 0.0;
        let mut prev = self.ground_truth(0.0).map(|g| g.pose.p).unwrap_or_default();
        for i in 1..=n {
            let t = self.duration * i as f64 / n as f64;
            let p = self.ground_truth(t).map(|g| g.pose.p).unwrap_or(prev);
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

/// `Rz(yaw) Ry(pitch) Rx(roll)`
pub fn euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    Matrix3::new(
        cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
        sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
        -sp, cp * sr, cp * cr,
    )
}

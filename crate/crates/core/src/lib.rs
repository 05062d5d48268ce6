//! Tightly-coupled visual-inertial-magnetometer odometry.
//!
//! The crate is organised around the estimation pipeline:
//!
//! - [`so3`]: rotation kernels (exp/log, Hamilton quaternions).
//! - [`imu`]: preintegration of gyroscope/accelerometer samples and the
//!   inertial residual.
//! - [`mag`]: magnetometer model, soft/hard-iron calibration, the
//!   preintegration-based relative-orientation residual, ENU alignment and
//!   Allan deviation.
//! - [`vision`]: pinhole projection, reprojection residuals, triangulation.
//! - [`estimator`]: the keyframe sliding-window optimizer and marginalization.
//! - [`sim`]: analytic trajectories and synthetic sensor streams.
//! - [`eval`]: trajectory alignment, ATE and relative yaw error.
//! - [`io`]: dataset files and `key = value` configuration.

pub mod error;
pub mod so3;
pub mod imu;
pub mod mag;
pub mod vision;
pub mod estimator;
pub mod sim;
pub mod eval;
pub mod io;

pub use error::{Error, Result};

use magvio::estimator::{run_sequence, Mode, RunConfig};
use magvio::eval::{ate, rpe_yaw, umeyama_align, AlignmentMode, TimedPose, Trajectory};
use magvio::imu::{default_gravity, ImuNoiseParams, ImuSample, PreintegratedImu, SystemState};
use magvio::io::{self, Dataset};
use magvio::mag::{self, MagCalibration, MagSample};
use magvio::sim::{self, SimConfig, TrajectoryKind, TrajectoryModel};
use magvio::so3;
use magvio::vision::{triangulate, Pose};
use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    vec3(3.0).prop_map(|w| so3::quat_exp(&w))
}

fn imu_segment() -> impl Strategy<Value = Vec<ImuSample>> {
    (vec3(1.0), vec3(2.0), 5usize..40).prop_map(|(w, a, n)| {
        (0..=n)
            .map(|i| {
                let t = i as f64 * 0.005;
                ImuSample::new(t, w + Vector3::new(t.sin(), 0.3 * t, -t), a + Vector3::new(0.0, 0.0, 9.81) + Vector3::new(t, t * t, 0.0))
            })
            .collect()
    })
}

fn trajectory(n: usize, seed: f64) -> Trajectory {
    let poses = (0..n)
        .map(|i| {
            let t = i as f64 * 0.1;
            let p = Vector3::new(3.0 * (0.3 * t + seed).cos(), 3.0 * (0.3 * t + seed).sin(), 0.2 * t.sin());
            let q = so3::quat_exp(&Vector3::new(0.05 * t.sin(), 0.04 * t.cos(), 0.3 * t + seed));
            TimedPose { t, pose: Pose::new(p, q), v: Vector3::zeros() }
        })
        .collect();
    Trajectory::new(poses).unwrap()
}

fn transformed(traj: &Trajectory, r: &UnitQuaternion<f64>, t: &Vector3<f64>) -> Trajectory {
    let poses = traj
        .poses()
        .iter()
        .map(|p| TimedPose { t: p.t, pose: Pose::new(r * p.pose.p + t, so3::quat_multiply(r, &p.pose.q)), v: r * p.v })
        .collect();
    Trajectory::new(poses).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preintegration_does_not_depend_on_start_state(samples in imu_segment(), p in vec3(10.0), q in rotation(), v in vec3(3.0)) {
        let pre = PreintegratedImu::from_samples(&samples, Vector3::zeros(), Vector3::zeros(), ImuNoiseParams::default()).unwrap();
        let again = PreintegratedImu::from_samples(&samples, Vector3::zeros(), Vector3::zeros(), ImuNoiseParams::default()).unwrap();
        prop_assert_eq!(pre.alpha, again.alpha);
        prop_assert_eq!(pre.gamma, again.gamma);
        // the prediction is consistent for any start state
        let x = SystemState::new(0.0, p, q, v);
        let x1 = pre.predict_state(&x, &default_gravity());
        let r = pre.inertial_residual(&x, &x1, &default_gravity());
        prop_assert!(r.amax() < 1e-9, "residual {}", r.amax());
    }

    #[test]
    fn preintegration_covariance_is_psd_and_grows(samples in imu_segment()) {
        let mut pre = PreintegratedImu::new(samples[0].t, Vector3::zeros(), Vector3::zeros(), ImuNoiseParams::default());
        let mut last = 0.0;
        for w in samples.windows(2) {
            pre.integrate_measurement(&w[0], &w[1]).unwrap();
            let sym = (pre.cov + pre.cov.transpose()) * 0.5;
            let min = sym.symmetric_eigenvalues().min();
            prop_assert!(min > -1e-15, "min eigenvalue {min}");
            let tr = pre.cov.trace();
            prop_assert!(tr >= last);
            last = tr;
        }
    }

    #[test]
    fn calibration_round_trip(d in vec3(0.2), off in vec3(0.5), m in vec3(1.0)) {
        let s = Matrix3::identity() + Matrix3::from_diagonal(&d) * 0.5;
        let cal = MagCalibration::new(s.try_inverse().unwrap(), off).unwrap();
        let back = cal.correct(&cal.distort(&m));
        prop_assert!((back - m).norm() < 1e-12);
    }

    #[test]
    fn mag_residual_zero_and_yaw_invariant(qk in rotation(), dq in vec3(0.5), yaw in -3.0..3.0f64) {
        let field = mag::WorldField::from_angles(60.0, 5.0);
        let qk1 = so3::boxplus(&qk, &dq);
        let gamma = qk.inverse() * qk1;
        let (mj, mk1) = (field.measure(&qk1), field.measure(&qk1));
        let r = mag::mag_residual(&gamma, &qk, &qk1, &mj, &mk1);
        prop_assert!(r.norm() < 1e-12);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        let mj = field.measure(&so3::boxplus(&qk1, &Vector3::new(0.01, 0.0, 0.02)));
        let r0 = mag::mag_residual(&gamma, &qk, &qk1, &mj, &mk1);
        let r1 = mag::mag_residual(&gamma, &(rz * qk), &(rz * qk1), &mj, &mk1);
        prop_assert!((r0 - r1).norm() < 1e-12);
    }

    #[test]
    fn alignment_recovers_attitude(q in rotation()) {
        let field = mag::WorldField::from_angles(60.0, 0.0);
        let r = so3::quat_to_matrix(&q);
        let accel = r.transpose() * Vector3::z();
        let est = mag::initial_alignment(&accel, &field.measure(&q)).unwrap();
        prop_assert!((so3::quat_to_matrix(&est) * accel - Vector3::z()).norm() < 1e-9);
        prop_assert!(so3::boxminus(&est, &q).norm() < 1e-9);
    }

    #[test]
    fn projection_is_scale_invariant(x in vec3(2.0), z in 0.5..20.0f64, s in 0.1..10.0f64) {
        let cam = sim::default_camera();
        let xc = Vector3::new(x.x, x.y, z);
        let a = cam.project_camera(&xc).unwrap();
        let b = cam.project_camera(&(xc * s)).unwrap();
        prop_assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn triangulation_reproduces_point(l in vec3(2.0), p0 in vec3(0.3), p1 in vec3(0.3)) {
        let cam = sim::default_camera();
        let l = l + Vector3::new(8.0, 0.0, 0.0);
        let poses = [Pose::new(p0, UnitQuaternion::identity()), Pose::new(p1 + Vector3::new(0.0, 1.0, 0.0), UnitQuaternion::identity())];
        let views: Vec<(Pose, Vector2<f64>)> = poses.iter().map(|p| (*p, cam.project(p, &l).unwrap())).collect();
        let tri = triangulate(&views, &cam).unwrap();
        prop_assert!((tri.point - l).norm() < 1e-6, "{}", (tri.point - l).norm());
    }

    #[test]
    fn umeyama_is_exact(r in rotation(), t in vec3(5.0), s in 0.2..5.0f64) {
        let est: Vec<Vector3<f64>> = (0..20).map(|i| { let f = i as f64; Vector3::new(f.sin() * 3.0, (1.7 * f).cos(), 0.1 * f) }).collect();
        let rm = so3::quat_to_matrix(&r);
        let reference: Vec<Vector3<f64>> = est.iter().map(|p| rm * p * s + t).collect();
        let a = umeyama_align(&est, &reference, AlignmentMode::Sim3).unwrap();
        prop_assert!((a.scale - s).abs() < 1e-9);
        prop_assert!((a.rotation - rm).amax() < 1e-9);
        prop_assert!((a.translation - t).amax() < 1e-8);
    }

    #[test]
    fn ate_is_invariant_to_rigid_motion(r in rotation(), t in vec3(10.0)) {
        let reference = trajectory(60, 0.0);
        let est = trajectory(60, 0.05);
        let a0 = ate(&est, &reference, AlignmentMode::Se3, 1e-6).unwrap();
        let a1 = ate(&transformed(&est, &r, &t), &reference, AlignmentMode::Se3, 1e-6).unwrap();
        prop_assert!((a0.rmse_trans - a1.rmse_trans).abs() < 1e-9);
        prop_assert!((a0.rmse_rot_deg - a1.rmse_rot_deg).abs() < 1e-7);
    }

    #[test]
    fn rpe_is_invariant_to_initial_yaw(yaw in -3.0..3.0f64, t in vec3(10.0)) {
        let reference = trajectory(80, 0.0);
        let est = trajectory(80, 0.05);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        let r0 = rpe_yaw(&est, &reference, &[1.0, 3.0], 1e-6).unwrap();
        let r1 = rpe_yaw(&transformed(&est, &rz, &t), &reference, &[1.0, 3.0], 1e-6).unwrap();
        for (a, b) in r0.iter().zip(&r1) {
            prop_assert!((a.mean_deg - b.mean_deg).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_csv_round_trip(seed in -3.0..3.0f64, n in 1usize..30) {
        let traj = trajectory(n, seed);
        let text = io::trajectory_to_csv(&traj);
        let back = io::parse_trajectory(&text, "est.csv").unwrap();
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn imu_and_mag_csv_round_trip(samples in imu_segment()) {
        let back = io::parse_imu(&io::imu_to_csv(&samples), "imu.csv").unwrap();
        prop_assert_eq!(&back, &samples);
        let mag: Vec<MagSample> = samples.iter().map(|s| MagSample::new(s.t, s.gyro)).collect();
        let back = io::parse_mag(&io::mag_to_csv(&mag), "mag.csv").unwrap();
        prop_assert_eq!(back, mag);
    }
}

#[test]
fn run_sequence_is_deterministic() {
    let cfg = SimConfig {
        trajectory: TrajectoryModel::new(TrajectoryKind::circle(5.0, 0.1), 15.0).with_lead_in(1.0, 3.0),
        sigma_g: 2e-4,
        sigma_a: 2e-3,
        sigma_m: 1e-3,
        sigma_px: 1.0,
        seed: 11,
        ..SimConfig::default()
    };
    let simulation = sim::simulate(&cfg).unwrap();
    let ds = Dataset::from_simulation(&simulation, cfg.camera, Some(cfg.true_calibration().unwrap()));
    for mode in [Mode::Vio, Mode::VioMag] {
        let rc = RunConfig { mode, ..RunConfig::default() };
        let a = run_sequence(&ds, &rc).unwrap();
        let b = run_sequence(&ds, &rc).unwrap();
        assert_eq!(io::trajectory_to_csv(&a.trajectory), io::trajectory_to_csv(&b.trajectory));
    }
}

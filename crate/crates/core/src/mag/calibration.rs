//! Soft/hard-iron calibration.
//!
//! Raw readings follow `m_raw = S R^T m_W + h + noise`. The calibration stores
//! `A = S^-1` and `h`, and corrects readings with `m = A (m_raw - h)` so that
//! corrected readings lie on the unit sphere.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

use super::MagSample;

pub const MIN_ELLIPSOID_SAMPLES: usize = 100;
pub const MIN_SPHERE_SAMPLES: usize = 50;
/// Number of the 8 direction octants that must contain samples.
pub const MIN_OCTANTS: usize = 6;
/// Mean resultant length of sample directions above which the sphere centre
/// is considered unobservable.
pub const MAX_DIRECTION_CONCENTRATION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagCalibration {
    /// Soft-iron inverse, symmetric positive definite.
    pub a: Matrix3<f64>,
    /// Hard-iron offset in raw units.
    pub h: Vector3<f64>,
}

impl Default for MagCalibration {
    fn default() -> Self {
        Self::identity()
    }
}

impl MagCalibration {
    pub fn identity() -> Self {
        Self {
            a: Matrix3::identity(),
            h: Vector3::zeros(),
        }
    }

    pub fn new(a: Matrix3<f64>, h: Vector3<f64>) -> Result<Self> {
        let cal = Self { a, h };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        let asym = (self.a - self.a.transpose()).abs().max();
        if !asym.is_finite() || asym > 1e-9 * self.a.abs().max().max(1.0) {
            return Err(Error::Config(format!("soft-iron matrix is not symmetric (asymmetry {asym:.3e})")));
        }
        let eig = self.a.symmetric_eigenvalues();
        if eig.min() <= 0.0 || !self.h.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("soft-iron matrix must be positive definite".into()));
        }
        Ok(())
    }

    pub fn correct(&self, raw: &Vector3<f64>) -> Vector3<f64> {
        self.a * (raw - self.h)
    }

    /// `A (m_raw - h)`, timestamp preserved.
    pub fn apply(&self, raw: &MagSample) -> MagSample {
        MagSample {
            t: raw.t,
            m: self.correct(&raw.m),
        }
    }

    /// Forward distortion `S m + h` with `S = A^-1`.
    pub fn distort(&self, m: &Vector3<f64>) -> Vector3<f64> {
        let s = self.a.try_inverse().expect("validated calibration is invertible");
        s * m + self.h
    }

    /// Row-major `A` followed by `h`.
    pub fn to_record(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.a[(r, c)];
            }
        }
        out[9..].copy_from_slice(self.h.as_slice());
        out
    }

    pub fn from_record(rec: &[f64; 12]) -> Result<Self> {
        let a = Matrix3::from_row_slice(&rec[..9]);
        Self::new(a, Vector3::from_row_slice(&rec[9..]))
    }
}

/// Statistics of calibrated samples, reported by the CLI.
#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    pub mean_radius: f64,
    pub rms_radius_error: f64,
    pub max_radius_error: f64,
    pub octants_covered: usize,
}

pub fn fit_report(samples: &[MagSample], cal: &MagCalibration) -> FitReport {
    let radii: Vec<f64> = samples.iter().map(|s| cal.correct(&s.m).norm()).collect();
    let n = radii.len().max(1) as f64;
    let mean = radii.iter().sum::<f64>() / n;
    let rms = (radii.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / n).sqrt();
    let max = radii.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    FitReport {
        mean_radius: mean,
        rms_radius_error: rms,
        max_radius_error: max,
        octants_covered: octant_coverage(samples.iter().map(|s| s.m - cal.h)),
    }
}

/// Number of octants (sign patterns) hit by the given direction vectors.
/// Components within a tiny band around zero count as non-negative.
pub fn octant_coverage(dirs: impl Iterator<Item = Vector3<f64>>) -> usize {
    let mut seen = [false; 8];
    for d in dirs {
        let scale = d.norm();
        if scale == 0.0 {
            continue;
        }
        let idx = d.iter().enumerate().fold(0usize, |acc, (i, v)| acc | (((*v / scale) < -1e-9) as usize) << i);
        seen[idx] = true;
    }
    seen.iter().filter(|s| **s).count()
}

/// Centres and scales raw points for a well-conditioned algebraic fit.
fn normalization(points: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let scale = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    (mean, if scale > 0.0 { scale } else { 1.0 })
}

/// Full soft/hard-iron calibration by algebraic ellipsoid fitting.
///
/// Fits `v^T d(x) = 0` with `d(x) = [x^2, y^2, z^2, 2yz, 2xz, 2xy, 2x, 2y, 2z, 1]`
/// under the ellipsoid-specific constraint `4J - I^2 = 1` (k = 4), then extracts
/// the centre and the SPD square root of the normalized quadric.
pub fn fit_ellipsoid(samples: &[MagSample]) -> Result<MagCalibration> {
    if samples.len() < MIN_ELLIPSOID_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_ELLIPSOID_SAMPLES,
            got: samples.len(),
        });
    }
    let raw: Vec<Vector3<f64>> = samples.iter().map(|s| s.m).collect();
    if raw.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InsufficientExcitation("non-finite magnetometer sample".into()));
    }
    let (mean, scale) = normalization(&raw);
    let pts: Vec<Vector3<f64>> = raw.iter().map(|p| (p - mean) / scale).collect();

    let mut s = SMatrix::<f64, 10, 10>::zeros();
    for p in &pts {
        let (x, y, z) = (p.x, p.y, p.z);
        let d = SVector::<f64, 10>::from_column_slice(&[x * x, y * y, z * z, 2.0 * y * z, 2.0 * x * z, 2.0 * x * y, 2.0 * x, 2.0 * y, 2.0 * z, 1.0]);
        s += d * d.transpose();
    }
    s /= pts.len() as f64;

    // Coverage of the quadratic terms: a planar or linear point set leaves
    // some monomials unexcited and the scatter matrix rank deficient.
    // An exact ellipsoid leaves one null direction (the quadric itself).
    let mut eig: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let (second, max_e) = (eig[1], eig[9]);
    if !(second > 1e-12 * max_e) {
        return Err(Error::InsufficientExcitation(format!(
            "samples do not span all three axes (scatter condition {:.3e})",
            second.max(0.0) / max_e
        )));
    }

    let s11: Matrix6<f64> = s.fixed_view::<6, 6>(0, 0).into_owned();
    let s12: SMatrix<f64, 6, 4> = s.fixed_view::<6, 4>(0, 6).into_owned();
    let s22: Matrix4<f64> = s.fixed_view::<4, 4>(6, 6).into_owned();
    let s22_inv = s22
        .try_inverse()
        .ok_or_else(|| Error::InsufficientExcitation("linear terms are degenerate".into()))?;
    let reduced = s11 - s12 * s22_inv * s12.transpose();
    let reduced = 0.5 * (reduced + reduced.transpose());

    // Generalized problem reduced * v = lambda * C v. With reduced = L L^T the
    // constrained minimizer is the top eigenvector of L^-1 C L^-T.
    let ridge = 1e-13 * reduced.trace().max(f64::MIN_POSITIVE);
    let chol = (reduced + Matrix6::identity() * ridge)
        .cholesky()
        .ok_or_else(|| Error::Numerical("ellipsoid scatter matrix is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = constraint_matrix();
    let m = l_inv * c * l_inv.transpose();
    let m = 0.5 * (m + m.transpose());
    let se = m.symmetric_eigen();
    let (best, mu) = se
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    if !(mu > 0.0) {
        return Err(Error::InsufficientExcitation("no elliptic solution".into()));
    }
    let w = se.eigenvectors.column(best).into_owned();
    let v1 = l_inv.transpose() * w;
    let v2 = -s22_inv * s12.transpose() * v1;

    let q = Matrix3::new(v1[0], v1[5], v1[4], v1[5], v1[1], v1[3], v1[4], v1[3], v1[2]);
    let b = Vector3::new(v2[0], v2[1], v2[2]);
    let k = v2[3];
    let q_inv = q
        .try_inverse()
        .ok_or_else(|| Error::InsufficientExcitation("quadric is not central".into()))?;
    let centre = -q_inv * b;
    let rhs = centre.dot(&(q * centre)) - k;
    let shape = q / rhs;
    let se = shape.symmetric_eigen();
    if se.eigenvalues.min() <= 0.0 || !rhs.is_finite() {
        return Err(Error::InsufficientExcitation("fitted quadric is not an ellipsoid".into()));
    }
    // shape acts on normalized coordinates: raw = mean + scale * x.
    let sqrt_eig = se.eigenvalues.map(|e| e.sqrt() / scale);
    let a = se.eigenvectors * Matrix3::from_diagonal(&sqrt_eig) * se.eigenvectors.transpose();
    let a = 0.5 * (a + a.transpose());
    let h = mean + scale * centre;

    let covered = octant_coverage(raw.iter().map(|p| p - h));
    if covered < MIN_OCTANTS {
        return Err(Error::InsufficientExcitation(format!(
            "samples cover {covered} of 8 octants around the fitted centre, need {MIN_OCTANTS}; rotate the sensor about all three axes"
        )));
    }
    MagCalibration::new(a, h)
}

fn constraint_matrix() -> Matrix6<f64> {
    let mut c = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] = if i == j { -1.0 } else { 1.0 };
        }
    }
    for i in 3..6 {
        c[(i, i)] = -4.0;
    }
    c
}

/// Hard-iron-only calibration: sphere fit with `A` a scaled identity.
///
/// Solves `|x|^2 = 2 h^T x + (r^2 - |h|^2)` in the least-squares sense. When the
/// samples are planar the offset along the plane normal is unobservable and the
/// minimum-norm solution is returned for that component.
pub fn fit_hard_iron(samples: &[MagSample]) -> Result<MagCalibration> {
    if samples.len() < MIN_SPHERE_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SPHERE_SAMPLES,
            got: samples.len(),
        });
    }
    let raw: Vec<Vector3<f64>> = samples.iter().map(|s| s.m).collect();
    let (mean, scale) = normalization(&raw);
    let n = raw.len();
    let mut design = DMatrix::<f64>::zeros(n, 4);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, p) in raw.iter().enumerate() {
        let x = (p - mean) / scale;
        design[(i, 0)] = 2.0 * x.x;
        design[(i, 1)] = 2.0 * x.y;
        design[(i, 2)] = 2.0 * x.z;
        design[(i, 3)] = 1.0;
        rhs[i] = x.norm_squared();
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tiny = svd.singular_values.iter().filter(|s| **s <= 1e-9 * smax).count();
    if tiny > 1 || !(smax > 0.0) {
        return Err(Error::DegenerateSpread("samples do not constrain a sphere centre".into()));
    }
    let sol = svd
        .solve(&rhs, 1e-9 * smax)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let centre = Vector3::new(sol[0], sol[1], sol[2]);
    let r2 = sol[3] + centre.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::DegenerateSpread("sphere fit produced a non-positive radius".into()));
    }
    let radius = r2.sqrt() * scale;
    let h = mean + centre * scale;

    let n_f = n as f64;
    let resultant = raw.iter().fold(Vector3::zeros(), |acc, p| acc + (p - h).normalize()) / n_f;
    if resultant.norm() > MAX_DIRECTION_CONCENTRATION {
        return Err(Error::DegenerateSpread(format!(
            "sample directions are concentrated (mean resultant length {:.3}); rotate the sensor through a wider range",
            resultant.norm()
        )));
    }
    MagCalibration::new(Matrix3::identity() / radius, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3;
    use approx::assert_relative_eq;

    /// Deterministic quasi-uniform points on the unit sphere (Fibonacci lattice).
    pub(crate) fn sphere_points(n: usize) -> Vec<Vector3<f64>> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect()
    }

    fn samples(points: impl IntoIterator<Item = Vector3<f64>>) -> Vec<MagSample> {
        points.into_iter().enumerate().map(|(i, m)| MagSample { t: i as f64 * 0.01, m }).collect()
    }

    #[test]
    fn identity_calibration_is_a_no_op() {
        let s = MagSample { t: 1.5, m: Vector3::new(0.3, -0.2, 0.9) };
        assert_eq!(MagCalibration::identity().apply(&s), s);
    }

    #[test]
    fn hard_iron_arithmetic() {
        let cal = MagCalibration::new(Matrix3::identity(), Vector3::new(0.5, 0.0, 0.0)).unwrap();
        let out = cal.apply(&MagSample { t: 0.0, m: Vector3::new(1.5, 0.0, 0.0) });
        assert_eq!(out.m, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn already_calibrated_sphere() {
        let cal = fit_ellipsoid(&samples(sphere_points(1000))).unwrap();
        assert!((cal.a - Matrix3::identity()).abs().max() < 1e-6);
        assert!(cal.h.norm() < 1e-6);
    }

    #[test]
    fn planar_samples_fail_full_fit() {
        let pts = (0..500).map(|i| {
            let a = i as f64 * 0.0126;
            Vector3::new(a.cos(), a.sin(), 0.0)
        });
        let err = fit_ellipsoid(&samples(pts)).unwrap_err();
        assert!(matches!(err, Error::InsufficientExcitation(_)), "{err}");
    }

    #[test]
    fn too_few_samples() {
        let err = fit_ellipsoid(&samples(sphere_points(50))).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { needed: 100, got: 50 }));
        let err = fit_hard_iron(&samples(sphere_points(20))).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { needed: 50, got: 20 }));
    }

    #[test]
    fn sphere_fit_recovers_offset() {
        let h = Vector3::new(0.3, 0.1, -0.2);
        let cal = fit_hard_iron(&samples(sphere_points(400).into_iter().map(|p| p + h))).unwrap();
        assert!((cal.h - h).norm() < 1e-6);
        assert_relative_eq!(cal.a, Matrix3::identity(), epsilon = 1e-9);
        let centred = fit_hard_iron(&samples(sphere_points(400))).unwrap();
        assert!(centred.h.norm() < 1e-9);
    }

    #[test]
    fn narrow_cone_is_degenerate() {
        // directions within 10 degrees of +x, i.e. a 20 degree cone
        let pts = sphere_points(20000).into_iter().filter(|p| p.x > (10f64).to_radians().cos());
        let pts: Vec<_> = pts.map(|p| p * 0.7 + Vector3::new(0.1, 0.2, 0.3)).collect();
        assert!(pts.len() >= 50);
        let err = fit_hard_iron(&samples(pts)).unwrap_err();
        assert!(matches!(err, Error::DegenerateSpread(_)), "{err}");
    }

    #[test]
    fn record_round_trip() {
        let a = so3::rot_z(0.3) * Matrix3::from_diagonal(&Vector3::new(0.8, 1.0, 1.2)) * so3::rot_z(0.3).transpose();
        let cal = MagCalibration::new(a, Vector3::new(0.1, -0.2, 0.3)).unwrap();
        assert_eq!(MagCalibration::from_record(&cal.to_record()).unwrap(), cal);
    }

    #[test]
    fn rejects_non_spd() {
        assert!(MagCalibration::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0)), Vector3::zeros()).is_err());
        let mut a = Matrix3::identity();
        a[(0, 1)] = 0.2;
        assert!(MagCalibration::new(a, Vector3::zeros()).is_err());
    }
}

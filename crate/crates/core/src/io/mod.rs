//! Dataset directories, CSV streams and configuration files.
//!
//! A dataset directory holds `imu.csv`, `tracks.csv` and `camera.cfg`, and
//! optionally `mag.csv`, `magcal.cfg` and `groundtruth.csv`. Frames without
//! any feature appear in `tracks.csv` as a row with empty landmark and pixel
//! columns.

pub mod config;

pub use config::{parse_run_config, parse_sim_config, KeyValues};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::eval::{TimedPose, Trajectory};
use crate::imu::ImuSample;
use crate::mag::{MagCalibration, MagSample};
use crate::sim::Simulation;
use crate::so3;
use crate::vision::{CameraModel, FeatureObservation, Frame, Pose};

pub const IMU_HEADER: [&str; 7] = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
pub const MAG_HEADER: [&str; 4] = ["t", "mx", "my", "mz"];
pub const TRACKS_HEADER: [&str; 5] = ["frame_id", "t", "landmark_id", "u", "v"];
pub const TRAJECTORY_HEADER: [&str; 11] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];

/// Pixel standard deviation attached to observations read from disk.
pub const DEFAULT_SIGMA_PX: f64 = 1.0;

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    /// `None` marks an empty cell.
    pub rows: Vec<Vec<Option<f64>>>,
    /// Line number of each row in the source file.
    pub lines: Vec<usize>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

/// Reads a CSV file of numbers. Rows are numbered as lines of the file, the
/// header being row 1. Non-finite values are rejected.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    parse_table(&text, &file_name(path))
}

pub fn parse_table(text: &str, file: &str) -> Result<Table> {
    let fmt_err = |row: usize, msg: String| Error::Format { file: file.into(), row, msg };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| fmt_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(fmt_err(1, "missing header row".into()));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            fmt_err(row, e.to_string())
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(rows.len() + 2);
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if cell.is_empty() {
                    return Ok(None);
                }
                let col = header.get(c).map(String::as_str).unwrap_or("?");
                let v: f64 = cell.parse().map_err(|_| fmt_err(row, format!("column '{col}': cannot parse '{cell}'")))?;
                if !v.is_finite() {
                    return Err(fmt_err(row, format!("column '{col}': non-finite value '{cell}'")));
                }
                Ok(Some(v))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
        lines.push(row);
    }
    Ok(Table { header, rows, lines })
}

struct Checked<'a> {
    table: &'a Table,
    file: &'a str,
}

impl<'a> Checked<'a> {
    fn new(table: &'a Table, file: &'a str, expected: &[&str]) -> Result<Self> {
        if table.header != expected {
            return Err(Error::Format {
                file: file.into(),
                row: 1,
                msg: format!("expected columns {}, got {}", expected.join(","), table.header.join(",")),
            });
        }
        Ok(Self { table, file })
    }

    fn get(&self, i: usize, c: usize) -> Result<f64> {
        self.table.rows[i][c].ok_or_else(|| Error::Format {
            file: self.file.into(),
            row: self.table.lines[i],
            msg: format!("column '{}': missing value", self.table.header[c]),
        })
    }

    fn check_time_order(&self, i: usize, prev: Option<f64>, t: f64, strict: bool) -> Result<()> {
        if let Some(p) = prev {
            if t < p || (strict && t == p) {
                return Err(Error::Format {
                    file: self.file.into(),
                    row: self.table.lines[i],
                    msg: format!("column 't': timestamps not increasing ({t} after {p})"),
                });
            }
        }
        Ok(())
    }
}

pub fn parse_imu(text: &str, file: &str) -> Result<Vec<ImuSample>> {
    let table = parse_table(text, file)?;
    let c = Checked::new(&table, file, &IMU_HEADER)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        let v: Vec<f64> = (0..7).map(|k| c.get(i, k)).collect::<Result<_>>()?;
        c.check_time_order(i, out.last().map(|s| s.t), v[0], true)?;
        out.push(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn parse_mag(text: &str, file: &str) -> Result<Vec<MagSample>> {
    let table = parse_table(text, file)?;
    let c = Checked::new(&table, file, &MAG_HEADER)?;
    let mut out: Vec<MagSample> = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        let v: Vec<f64> = (0..4).map(|k| c.get(i, k)).collect::<Result<_>>()?;
        c.check_time_order(i, out.last().map(|s| s.t), v[0], true)?;
        out.push(MagSample::new(v[0], Vector3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}

fn as_id(v: f64, file: &str, row: usize, col: &str) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 || v > 2f64.powi(53) {
        return Err(Error::Format { file: file.into(), row, msg: format!("column '{col}': '{v}' is not a non-negative integer") });
    }
    Ok(v as u64)
}

pub fn parse_tracks(text: &str, file: &str) -> Result<Vec<Frame>> {
    let table = parse_table(text, file)?;
    let c = Checked::new(&table, file, &TRACKS_HEADER)?;
    let mut frames: Vec<Frame> = Vec::new();
    for i in 0..table.rows.len() {
        let row = table.lines[i];
        let id = as_id(c.get(i, 0)?, file, row, "frame_id")?;
        let t = c.get(i, 1)?;
        let new_frame = match frames.last() {
            Some(f) if f.id == id => {
                if f.t != t {
                    return Err(Error::Format { file: file.into(), row, msg: format!("column 't': frame {id} has two timestamps") });
                }
                false
            }
            Some(f) => {
                if t <= f.t {
                    return Err(Error::Format { file: file.into(), row, msg: format!("column 't': frames not increasing in time ({t} after {})", f.t) });
                }
                true
            }
            None => true,
        };
        if new_frame {
            frames.push(Frame { id, t, observations: Vec::new() });
        }
        let r = &table.rows[i];
        match (r[2], r[3], r[4]) {
            (None, None, None) => {}
            (Some(l), Some(u), Some(v)) => {
                let landmark_id = as_id(l, file, row, "landmark_id")?;
                frames.last_mut().unwrap().observations.push(FeatureObservation {
                    frame_id: id,
                    landmark_id,
                    uv: Vector2::new(u, v),
                    sigma_px: DEFAULT_SIGMA_PX,
                });
            }
            _ => return Err(Error::Format { file: file.into(), row, msg: "columns 'landmark_id', 'u', 'v' must be all present or all empty".into() }),
        }
    }
    Ok(frames)
}

pub fn parse_trajectory(text: &str, file: &str) -> Result<Trajectory> {
    let table = parse_table(text, file)?;
    let c = Checked::new(&table, file, &TRAJECTORY_HEADER)?;
    let mut out: Vec<TimedPose> = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        let v: Vec<f64> = (0..11).map(|k| c.get(i, k)).collect::<Result<_>>()?;
        c.check_time_order(i, out.last().map(|s| s.t), v[0], true)?;
        let q = Quaternion::new(v[4], v[5], v[6], v[7]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Format { file: file.into(), row: table.lines[i], msg: format!("columns 'qw'..'qz': quaternion norm {} is not 1", q.norm()) });
        }
        out.push(TimedPose {
            t: v[0],
            pose: Pose::new(Vector3::new(v[1], v[2], v[3]), exact_unit(&q)),
            v: Vector3::new(v[8], v[9], v[10]),
        });
    }
    Trajectory::new(out)
}

/// Keeps already-normalized canonical quaternions bit-exact so that files
/// round-trip without drift.
pub fn exact_unit(q: &Quaternion<f64>) -> nalgebra::UnitQuaternion<f64> {
    if q.w >= 0.0 && (q.norm_squared() - 1.0).abs() < 1e-14 {
        nalgebra::UnitQuaternion::new_unchecked(*q)
    } else {
        so3::canonical(q)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Format { file: file_name(path), row: 0, msg: e.to_string() })
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    parse_imu(&read(path)?, &file_name(path))
}

pub fn read_mag(path: &Path) -> Result<Vec<MagSample>> {
    parse_mag(&read(path)?, &file_name(path))
}

pub fn read_tracks(path: &Path) -> Result<Vec<Frame>> {
    parse_tracks(&read(path)?, &file_name(path))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read(path)?, &file_name(path))
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    let mut kv = KeyValues::parse(&read(path)?, &file_name(path))?;
    let cam = config::parse_camera(&mut kv)?;
    kv.finish()?;
    Ok(cam)
}

pub fn read_magcal(path: &Path) -> Result<MagCalibration> {
    let mut kv = KeyValues::parse(&read(path)?, &file_name(path))?;
    let cal = config::parse_magcal(&mut kv)?;
    kv.finish()?;
    Ok(cal)
}

fn push_row(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn imu_to_csv(samples: &[ImuSample]) -> String {
    let mut s = IMU_HEADER.join(",") + "\n";
    for x in samples {
        push_row(&mut s, &[x.t, x.gyro.x, x.gyro.y, x.gyro.z, x.accel.x, x.accel.y, x.accel.z]);
    }
    s
}

pub fn mag_to_csv(samples: &[MagSample]) -> String {
    let mut s = MAG_HEADER.join(",") + "\n";
    for x in samples {
        push_row(&mut s, &[x.t, x.m.x, x.m.y, x.m.z]);
    }
    s
}

pub fn tracks_to_csv(frames: &[Frame]) -> String {
    let mut s = TRACKS_HEADER.join(",") + "\n";
    for f in frames {
        if f.observations.is_empty() {
            let _ = writeln!(s, "{},{},,,", f.id, f.t);
        }
        for o in &f.observations {
            let _ = writeln!(s, "{},{},{},{},{}", f.id, f.t, o.landmark_id, o.uv.x, o.uv.y);
        }
    }
    s
}

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut s = TRAJECTORY_HEADER.join(",") + "\n";
    for p in traj.poses() {
        let (x, q, v) = (&p.pose.p, &p.pose.q, &p.v);
        push_row(&mut s, &[p.t, x.x, x.y, x.z, q.w, q.i, q.j, q.k, v.x, v.y, v.z]);
    }
    s
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, trajectory_to_csv(traj).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    /// Raw magnetometer readings.
    pub mag: Option<Vec<MagSample>>,
    pub frames: Vec<Frame>,
    pub camera: CameraModel,
    pub magcal: Option<MagCalibration>,
    pub groundtruth: Option<Trajectory>,
}

fn optional<T>(path: PathBuf, f: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        f(&path).map(Some)
    } else {
        Ok(None)
    }
}

impl Dataset {
    pub fn from_simulation(sim: &Simulation, camera: CameraModel, magcal: Option<MagCalibration>) -> Self {
        Self {
            imu: sim.imu.clone(),
            mag: Some(sim.mag.clone()),
            frames: sim.tracks.frames.clone(),
            camera,
            magcal,
            groundtruth: Some(sim.groundtruth.clone()),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
        }
        let ds = Self {
            imu: read_imu(&dir.join("imu.csv"))?,
            mag: optional(dir.join("mag.csv"), read_mag)?,
            frames: read_tracks(&dir.join("tracks.csv"))?,
            camera: read_camera(&dir.join("camera.cfg"))?,
            magcal: optional(dir.join("magcal.cfg"), read_magcal)?,
            groundtruth: optional(dir.join("groundtruth.csv"), read_trajectory)?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("imu.csv"), imu_to_csv(&self.imu).as_bytes())?;
        if let Some(m) = &self.mag {
            write_atomic(&dir.join("mag.csv"), mag_to_csv(m).as_bytes())?;
        }
        write_atomic(&dir.join("tracks.csv"), tracks_to_csv(&self.frames).as_bytes())?;
        write_atomic(&dir.join("camera.cfg"), config::camera_to_string(&self.camera).as_bytes())?;
        if let Some(c) = &self.magcal {
            write_atomic(&dir.join("magcal.cfg"), config::magcal_to_string(c).as_bytes())?;
        }
        if let Some(g) = &self.groundtruth {
            write_atomic(&dir.join("groundtruth.csv"), trajectory_to_csv(g).as_bytes())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.imu.len() < 2 {
            return Err(Error::Format { file: "imu.csv".into(), row: 0, msg: format!("need at least 2 samples, got {}", self.imu.len()) });
        }
        if self.frames.is_empty() {
            return Err(Error::Format { file: "tracks.csv".into(), row: 0, msg: "no frames".into() });
        }
        self.camera.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imu_round_trip_is_exact() {
        let s = vec![
            ImuSample::new(0.0, Vector3::new(0.1, -1e-17, 3.0), Vector3::new(0.0, 0.0, 9.80665)),
            ImuSample::new(0.005, Vector3::new(1.0 / 3.0, 2.0, -0.0), Vector3::new(1e300, -2.5e-8, 7.0)),
        ];
        assert_eq!(parse_imu(&imu_to_csv(&s), "imu.csv").unwrap(), s);
    }

    #[test]
    fn corrupt_row_is_located() {
        let text = "t,gx,gy,gz,ax,ay,az\n0,0,0,0,0,0,9.8\n0.005,0,abc,0,0,0,9.8\n";
        match parse_imu(text, "imu.csv") {
            Err(Error::Format { file, row, msg }) => {
                assert_eq!(file, "imu.csv");
                assert_eq!(row, 3);
                assert!(msg.contains("gy"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infinity_rejected() {
        let text = "t,mx,my,mz\n0,inf,0,0\n";
        assert!(matches!(parse_mag(text, "mag.csv"), Err(Error::Format { row: 2, .. })));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(matches!(parse_mag("t,x,y,z\n", "mag.csv"), Err(Error::Format { row: 1, .. })));
    }

    #[test]
    fn tracks_keep_empty_frames() {
        let frames = vec![
            Frame { id: 0, t: 0.0, observations: vec![] },
            Frame {
                id: 1,
                t: 0.1,
                observations: vec![FeatureObservation { frame_id: 1, landmark_id: 4, uv: Vector2::new(1.5, 2.25), sigma_px: DEFAULT_SIGMA_PX }],
            },
        ];
        assert_eq!(parse_tracks(&tracks_to_csv(&frames), "tracks.csv").unwrap(), frames);
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let q = so3::canonical(&Quaternion::new(0.3, -0.5, 0.1, 0.8).normalize());
        let traj = Trajectory::new(vec![
            TimedPose { t: 0.0, pose: Pose::new(Vector3::new(1.0, 2.0, 3.0), q), v: Vector3::new(0.1, 0.2, 0.3) },
            TimedPose { t: 1.0 / 7.0, pose: Pose::identity(), v: Vector3::zeros() },
        ])
        .unwrap();
        let back = parse_trajectory(&trajectory_to_csv(&traj), "t.csv").unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn timestamp_regression_rejected() {
        let text = "t,mx,my,mz\n1,0,0,1\n0.5,0,0,1\n";
        assert!(matches!(parse_mag(text, "mag.csv"), Err(Error::Format { row: 3, .. })));
    }
}

//! On-disk sequence formats.
//!
//! A sequence directory holds:
//!
//! * `manifest.txt`: `key = value` lines, `#` starts a comment. Keys are
//!   `version`, `scan_period`, `vertical_fov`, `scan_lines`, `max_range`,
//!   `imu`, `scans`, `scan_count`, and optionally `ground_truth`,
//!   `extrinsic` (`tx ty tz qx qy qz qw`, IMU from LiDAR) and
//!   `scene_diameter`.
//! * one binary file per scan, `<scans>/NNNNNN.bin`, little-endian:
//!   magic `ELSC`, `u32` point count, `f64` scan-end stamp, then per point
//!   `f32 x, y, z, offset` with the offset in seconds from scan start.
//! * an IMU text file, one sample per line: `stamp wx wy wz ax ay az`.
//! * trajectories as text, one pose per line: `stamp tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::estimator::ImuSample;
use crate::evaluation::Trajectory;
use crate::geometry::{RigidTransform, Vec3};
use crate::preprocess::{LidarScan, RawPoint, SensorModel};

pub const SCAN_MAGIC: &[u8; 4] = b"ELSC";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub sensor: SensorModel,
    pub imu_file: String,
    pub scans_dir: String,
    pub scan_count: usize,
    pub ground_truth: Option<String>,
    pub extrinsic: RigidTransform,
    pub scene_diameter: Option<f64>,
}

impl Manifest {
    pub fn new(sensor: SensorModel, scan_count: usize) -> Self {
        Self {
            sensor,
            imu_file: "imu.txt".into(),
            scans_dir: "scans".into(),
            scan_count,
            ground_truth: Some("ground_truth.txt".into()),
            extrinsic: RigidTransform::identity(),
            scene_diameter: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let s_ = &mut s;
        let _ = writeln!(s_, "# lio sequence manifest");
        let _ = writeln!(s_, "version = {MANIFEST_VERSION}");
        let _ = writeln!(s_, "scan_period = {}", self.sensor.scan_period);
        let _ = writeln!(s_, "vertical_fov = {}", self.sensor.vertical_fov);
        let _ = writeln!(s_, "scan_lines = {}", self.sensor.scan_lines);
        let _ = writeln!(s_, "max_range = {}", self.sensor.max_range);
        let _ = writeln!(s_, "imu = {}", self.imu_file);
        let _ = writeln!(s_, "scans = {}", self.scans_dir);
        let _ = writeln!(s_, "scan_count = {}", self.scan_count);
        if let Some(gt) = &self.ground_truth {
            let _ = writeln!(s_, "ground_truth = {gt}");
        }
        let _ = writeln!(s_, "extrinsic = {}", pose_fields(&self.extrinsic));
        if let Some(d) = self.scene_diameter {
            let _ = writeln!(s_, "scene_diameter = {d}");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest, IoError> {
        let mut version = None;
        let mut period = None;
        let mut fov = None;
        let mut lines = None;
        let mut range = None;
        let mut imu = None;
        let mut scans = None;
        let mut count = None;
        let mut gt = None;
        let mut extrinsic = RigidTransform::identity();
        let mut diameter = None;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IoError::parse(path, ln, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |what: &str| -> Result<f64, IoError> {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| IoError::parse(path, ln, format!("{what}: invalid number `{value}`")))
            };
            let int = |what: &str| -> Result<u64, IoError> {
                value
                    .parse::<u64>()
                    .map_err(|_| IoError::parse(path, ln, format!("{what}: invalid integer `{value}`")))
            };
            match key {
                "version" => version = Some(int(key)?),
                "scan_period" => period = Some(num(key)?),
                "vertical_fov" => fov = Some(num(key)?),
                "scan_lines" => lines = Some(int(key)?),
                "max_range" => range = Some(int(key)?),
                "imu" => imu = Some(value.to_string()),
                "scans" => scans = Some(value.to_string()),
                "scan_count" => count = Some(int(key)?),
                "ground_truth" => gt = Some(value.to_string()),
                "scene_diameter" => diameter = Some(num(key)?),
                "extrinsic" => {
                    extrinsic = parse_pose_fields(value)
                        .map_err(|m| IoError::parse(path, ln, format!("extrinsic: {m}")))?
                }
                other => return Err(IoError::parse(path, ln, format!("unknown key `{other}`"))),
            }
        }
        let need = |name: &str| IoError::parse(path, 0, format!("missing key `{name}`"));
        let version = version.ok_or_else(|| need("version"))?;
        if version != MANIFEST_VERSION as u64 {
            return Err(IoError::parse(path, 0, format!("unsupported version {version}")));
        }
        let sensor = SensorModel::new(
            fov.ok_or_else(|| need("vertical_fov"))?,
            lines.ok_or_else(|| need("scan_lines"))? as u32,
            range.ok_or_else(|| need("max_range"))? as u32,
            period.ok_or_else(|| need("scan_period"))?,
        )
        .map_err(|e| IoError::parse(path, 0, e.to_string()))?;
        Ok(Manifest {
            sensor,
            imu_file: imu.ok_or_else(|| need("imu"))?,
            scans_dir: scans.ok_or_else(|| need("scans"))?,
            scan_count: count.ok_or_else(|| need("scan_count"))? as usize,
            ground_truth: gt,
            extrinsic,
            scene_diameter: diameter,
        })
    }
}

fn pose_fields(t: &RigidTransform) -> String {
    let q = t.quaternion_xyzw();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t.translation.x, t.translation.y, t.translation.z, q[0], q[1], q[2], q[3]
    )
}

fn parse_floats<const N: usize>(text: &str) -> Result<[f64; N], String> {
    let mut out = [0.0; N];
    let mut it = text.split_whitespace();
    for (k, slot) in out.iter_mut().enumerate() {
        let tok = it.next().ok_or_else(|| format!("expected {N} fields, got {k}"))?;
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("invalid number `{tok}`"))?;
    }
    if it.next().is_some() {
        return Err(format!("expected {N} fields, got more"));
    }
    Ok(out)
}

fn parse_pose_fields(text: &str) -> Result<RigidTransform, String> {
    let v = parse_floats::<7>(text)?;
    RigidTransform::from_quaternion_xyzw(Vec3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]])
        .ok_or_else(|| "zero quaternion".to_string())
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

fn lines_of(path: &Path) -> Result<impl Iterator<Item = (usize, String)>, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let p = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.unwrap_or_else(|e| panic!("{}: {e}", p.display())))))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn encode_scan(scan: &LidarScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + scan.points.len() * 16);
    out.extend_from_slice(SCAN_MAGIC);
    out.extend_from_slice(&(scan.points.len() as u32).to_le_bytes());
    out.extend_from_slice(&scan.stamp.to_le_bytes());
    for p in &scan.points {
        for v in [p.position.x, p.position.y, p.position.z, p.offset] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<LidarScan, IoError> {
    let bad = |m: &str| IoError::parse(path, 0, m.to_string());
    if bytes.len() < 16 || &bytes[..4] != SCAN_MAGIC {
        return Err(bad("not a scan file (bad magic)"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let stamp = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if bytes.len() != 16 + 16 * count {
        return Err(bad(&format!("expected {count} points, file size {} does not match", bytes.len())));
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let points = (0..count)
        .map(|i| {
            let o = 16 + 16 * i;
            RawPoint::new(Vec3::new(f(o), f(o + 4), f(o + 8)), f(o + 12))
        })
        .collect();
    Ok(LidarScan::new(stamp, points))
}

pub fn write_scan(path: &Path, scan: &LidarScan) -> Result<(), IoError> {
    write_file(path, &encode_scan(scan))
}

pub fn read_scan(path: &Path) -> Result<LidarScan, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_scan(&bytes, path)
}

pub fn format_imu(samples: &[ImuSample]) -> String {
    let mut s = String::with_capacity(samples.len() * 100);
    for u in samples {
        let (w, a) = (u.angular_rate, u.linear_accel);
        let _ = writeln!(
            s,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            u.stamp, w.x, w.y, w.z, a.x, a.y, a.z
        );
    }
    s
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    write_file(path, format_imu(samples).as_bytes())
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (ln, line) in lines_of(path)? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats::<7>(line).map_err(|m| IoError::parse(path, ln, m))?;
        if out.last().is_some_and(|p| p.stamp >= v[0]) {
            return Err(IoError::parse(path, ln, "IMU stamps must be strictly increasing"));
        }
        out.push(ImuSample::new(v[0], Vec3::new(v[1], v[2], v[3]), Vec3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn format_trajectory(t: &Trajectory) -> String {
    let mut s = String::with_capacity(t.len() * 100);
    for (stamp, pose) in &t.poses {
        let _ = writeln!(s, "{stamp:.6} {}", pose_fields(pose));
    }
    s
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<(), IoError> {
    write_file(path, format_trajectory(t).as_bytes())
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory, IoError> {
    let mut out = Trajectory::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats::<8>(line).map_err(|m| IoError::parse(path, i + 1, m))?;
        let pose = RigidTransform::from_quaternion_xyzw(Vec3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])
            .ok_or_else(|| IoError::parse(path, i + 1, "zero quaternion"))?;
        if out.poses.last().is_some_and(|(s, _)| *s >= v[0]) {
            return Err(IoError::parse(path, i + 1, "stamps must be strictly increasing"));
        }
        out.push(v[0], pose);
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_trajectory(&read_text(path)?, path)
}

pub fn scan_file_name(index: usize) -> String {
    format!("{index:06}.bin")
}

/// Lazily reads a sequence directory.
#[derive(Debug, Clone)]
pub struct SequenceReader {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl SequenceReader {
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        let path = dir.join(MANIFEST_FILE);
        let manifest = Manifest::parse(&read_text(&path)?, &path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn imu_path(&self) -> PathBuf {
        self.dir.join(&self.manifest.imu_file)
    }

    pub fn scan_path(&self, index: usize) -> PathBuf {
        self.dir.join(&self.manifest.scans_dir).join(scan_file_name(index))
    }

    pub fn imu(&self) -> Result<Vec<ImuSample>, IoError> {
        read_imu(&self.imu_path())
    }

    pub fn scan(&self, index: usize) -> Result<LidarScan, IoError> {
        read_scan(&self.scan_path(index))
    }

    pub fn ground_truth(&self) -> Option<Result<Trajectory, IoError>> {
        self.manifest
            .ground_truth
            .as_ref()
            .map(|g| read_trajectory(&self.dir.join(g)))
    }

    /// Fails early, naming the first missing input.
    pub fn check_files(&self) -> Result<(), IoError> {
        let imu = self.imu_path();
        if !imu.is_file() {
            return Err(IoError::Missing(imu));
        }
        let scans = self.dir.join(&self.manifest.scans_dir);
        if self.manifest.scan_count > 0 && !scans.is_dir() {
            return Err(IoError::Missing(scans));
        }
        Ok(())
    }
}

/// Streams a sequence to disk.
#[derive(Debug)]
pub struct SequenceWriter {
    dir: PathBuf,
    manifest: Manifest,
    written: usize,
}

impl SequenceWriter {
    pub fn create(dir: &Path, manifest: Manifest) -> Result<Self, IoError> {
        fs::create_dir_all(dir.join(&manifest.scans_dir)).map_err(|e| IoError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            written: 0,
        })
    }

    pub fn write_imu(&self, samples: &[ImuSample]) -> Result<(), IoError> {
        write_imu(&self.dir.join(&self.manifest.imu_file), samples)
    }

    pub fn write_ground_truth(&self, t: &Trajectory) -> Result<(), IoError> {
        match &self.manifest.ground_truth {
            Some(g) => write_trajectory(&self.dir.join(g), t),
            None => Ok(()),
        }
    }

    pub fn push_scan(&mut self, scan: &LidarScan) -> Result<(), IoError> {
        let path = self.dir.join(&self.manifest.scans_dir).join(scan_file_name(self.written));
        let file = fs::File::create(&path).map_err(|e| IoError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&encode_scan(scan)).map_err(|e| IoError::io(&path, e))?;
        self.written += 1;
        Ok(())
    }

    /// Writes the manifest with the number of scans pushed.
    pub fn finish(mut self) -> Result<Manifest, IoError> {
        self.manifest.scan_count = self.written;
        write_file(&self.dir.join(MANIFEST_FILE), self.manifest.to_text().as_bytes())?;
        Ok(self.manifest)
    }
}

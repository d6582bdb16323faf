//! Scan preprocessing: range-binned adaptive downsampling and motion
//! undistortion to the scan-end time.
//!
//! A scan is split into 1 m wide radial bins. Bin `i` is downsampled on a
//! voxel grid whose resolution equals the spacing between neighbouring scan
//! lines at `i + 1` metres, so distant surfaces keep roughly the same sampling
//! pattern as nearby ones.

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RigidTransform, Timestamp, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
    #[error("no predicted state covers t = {t:.6} (earliest state at {earliest:.6})")]
    MissingStateCoverage { t: f64, earliest: f64 },
}

/// Intrinsic description of a spinning multi-beam LiDAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub scan_lines: u32,
    /// Maximum range in metres; also the number of radial bins.
    pub max_range: u32,
    /// Duration of one sweep in seconds.
    pub scan_period: f64,
}

impl SensorModel {
    pub fn new(
        vertical_fov: f64,
        scan_lines: u32,
        max_range: u32,
        scan_period: f64,
    ) -> Result<Self, PreprocessError> {
        let s = Self {
            vertical_fov,
            scan_lines,
            max_range,
            scan_period,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.vertical_fov > 0.0 && self.vertical_fov <= std::f64::consts::PI) {
            return Err(PreprocessError::InvalidSensor(format!(
                "vertical_fov must lie in (0, pi], got {}",
                self.vertical_fov
            )));
        }
        if self.scan_lines < 2 {
            return Err(PreprocessError::InvalidSensor(format!(
                "scan_lines must be >= 2, got {}",
                self.scan_lines
            )));
        }
        if self.max_range < 1 {
            return Err(PreprocessError::InvalidSensor("max_range must be >= 1".into()));
        }
        if !(self.scan_period > 0.0 && self.scan_period.is_finite()) {
            return Err(PreprocessError::InvalidSensor(format!(
                "scan_period must be positive, got {}",
                self.scan_period
            )));
        }
        Ok(())
    }

    pub fn bin_count(&self) -> usize {
        self.max_range as usize
    }

    pub fn bin_resolution(&self, bin: usize) -> f64 {
        bin_resolution(bin, self)
    }

    /// Radial bin of a sensor-frame point, or `None` when the point is out of
    /// range, at the origin, or not finite.
    pub fn bin_index(&self, p: &Vec3) -> Option<usize> {
        let range = p.norm();
        if !range.is_finite() || range <= 0.0 || range >= self.max_range as f64 {
            return None;
        }
        Some((range.floor() as usize).min(self.bin_count() - 1))
    }
}

/// Scan-line separation at the outer edge of bin `i`: `(i + 1) θ / (β − 1)`.
pub fn bin_resolution(bin: usize, sensor: &SensorModel) -> f64 {
    (bin as f64 + 1.0) * sensor.vertical_fov / (sensor.scan_lines as f64 - 1.0)
}

/// A single return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub position: Vec3,
    /// Seconds since the start of the sweep.
    pub offset: f64,
}

impl RawPoint {
    pub fn new(position: Vec3, offset: f64) -> Self {
        Self { position, offset }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    /// Scan-end time `t_k`.
    pub stamp: Timestamp,
    pub points: Vec<RawPoint>,
}

impl LidarScan {
    pub fn new(stamp: Timestamp, points: Vec<RawPoint>) -> Self {
        Self { stamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self, scan_period: f64) -> Timestamp {
        self.stamp - scan_period
    }
}

type VoxelKey = (i64, i64, i64);

fn voxel_key(p: &Vec3, resolution: f64) -> VoxelKey {
    (
        (p.x / resolution).floor() as i64,
        (p.y / resolution).floor() as i64,
        (p.z / resolution).floor() as i64,
    )
}

/// Splits point indices by radial bin, keeping input order within each bin.
pub fn bin_points(points: &[RawPoint], sensor: &SensorModel) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); sensor.bin_count()];
    for (i, p) in points.iter().enumerate() {
        if let Some(b) = sensor.bin_index(&p.position) {
            bins[b].push(i);
        }
    }
    bins
}

/// Range-adaptive downsampling. Each radial bin keeps the first point that
/// falls into every voxel of size `v_i`; the output lists bins in ascending
/// order.
pub fn range_filter(scan: &LidarScan, sensor: &SensorModel) -> LidarScan {
    let bins = bin_points(&scan.points, sensor);
    let mut out = Vec::with_capacity(scan.points.len() / 2);
    let mut seen = FxHashSet::default();
    for (b, members) in bins.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let res = sensor.bin_resolution(b);
        seen.clear();
        for &i in members {
            let p = scan.points[i];
            if seen.insert(voxel_key(&p.position, res)) {
                out.push(p);
            }
        }
    }
    LidarScan::new(scan.stamp, out)
}

/// Fixed-resolution voxel filter over the whole scan, used as the baseline
/// against the range-adaptive filter. Out-of-range points are dropped the same
/// way.
pub fn uniform_filter(scan: &LidarScan, sensor: &SensorModel, resolution: f64) -> LidarScan {
    let mut seen = FxHashSet::default();
    let points = scan
        .points
        .iter()
        .filter(|p| sensor.bin_index(&p.position).is_some())
        .filter(|p| seen.insert(voxel_key(&p.position, resolution)))
        .copied()
        .collect();
    LidarScan::new(scan.stamp, points)
}

/// Time-ordered IMU poses `ᴳT_I` from the filter prediction.
#[derive(Debug, Clone, Default)]
pub struct PoseHistory {
    stamps: Vec<Timestamp>,
    poses: Vec<RigidTransform>,
}

impl PoseHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pose; stamps must be non-decreasing.
    pub fn push(&mut self, stamp: Timestamp, pose: RigidTransform) {
        debug_assert!(self.stamps.last().is_none_or(|&s| s <= stamp));
        self.stamps.push(stamp);
        self.poses.push(pose);
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn clear(&mut self) {
        self.stamps.clear();
        self.poses.clear();
    }

    pub fn first_stamp(&self) -> Option<Timestamp> {
        self.stamps.first().copied()
    }

    pub fn last(&self) -> Option<(Timestamp, RigidTransform)> {
        Some((*self.stamps.last()?, *self.poses.last()?))
    }

    /// Pose at `t`, interpolated between the bracketing states. Times after the
    /// last state hold the last pose.
    pub fn pose_at(&self, t: Timestamp) -> Result<RigidTransform, PreprocessError> {
        const SLACK: f64 = 1e-9;
        let earliest = match self.stamps.first() {
            Some(&s) => s,
            None => {
                return Err(PreprocessError::MissingStateCoverage {
                    t,
                    earliest: f64::NAN,
                })
            }
        };
        if t < earliest - SLACK {
            return Err(PreprocessError::MissingStateCoverage { t, earliest });
        }
        let upper = self.stamps.partition_point(|&s| s <= t);
        if upper == 0 {
            return Ok(self.poses[0]);
        }
        if upper >= self.stamps.len() {
            return Ok(*self.poses.last().unwrap());
        }
        let (t0, t1) = (self.stamps[upper - 1], self.stamps[upper]);
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(self.poses[upper]);
        }
        let alpha = (t - t0) / span;
        Ok(self.poses[upper - 1].interpolate(&self.poses[upper], alpha))
    }
}

/// Maps every point to its position at the scan-end time:
/// `p^k = ᴸT_I · ᴵT^k_G · ᴳT^j_I · ᴵT_L · p^j`.
pub fn deskew(
    scan: &LidarScan,
    scan_period: f64,
    predicted: &PoseHistory,
    imu_from_lidar: &RigidTransform,
) -> Result<LidarScan, PreprocessError> {
    let start = scan.start_time(scan_period);
    let end_inv = predicted.pose_at(scan.stamp)?.inverse();
    let lidar_from_imu = imu_from_lidar.inverse();
    let mut points = Vec::with_capacity(scan.points.len());
    for p in &scan.points {
        let pose_j = predicted.pose_at(start + p.offset)?;
        let chain = lidar_from_imu * end_inv * pose_j * *imu_from_lidar;
        points.push(RawPoint::new(chain.transform_point(&p.position), scan_period));
    }
    Ok(LidarScan::new(scan.stamp, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_exp, Rot3};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn os_like() -> SensorModel {
        SensorModel::new(0.7854, 64, 100, 0.1).unwrap()
    }

    #[test]
    fn resolution_values() {
        let s = os_like();
        assert_relative_eq!(bin_resolution(0, &s), 0.7854 / 63.0, max_relative = 1e-12);
        assert!((bin_resolution(0, &s) - 0.012467).abs() < 5e-7);
        assert!((bin_resolution(9, &s) - 0.12467).abs() < 5e-6);
        let two = SensorModel::new(0.5, 2, 10, 0.1).unwrap();
        for i in 0..10 {
            assert_relative_eq!(bin_resolution(i, &two), (i as f64 + 1.0) * 0.5);
        }
        for i in 1..s.bin_count() {
            assert!(s.bin_resolution(i) > s.bin_resolution(i - 1));
        }
    }

    #[test]
    fn sensor_validation() {
        assert!(SensorModel::new(0.0, 64, 100, 0.1).is_err());
        assert!(SensorModel::new(0.5, 1, 100, 0.1).is_err());
        assert!(SensorModel::new(0.5, 16, 0, 0.1).is_err());
        assert!(SensorModel::new(4.0, 16, 10, 0.1).is_err());
    }

    #[test]
    fn same_voxel_keeps_first() {
        let s = os_like();
        let a = RawPoint::new(Vec3::new(2.001, 0.001, 0.001), 0.0);
        let b = RawPoint::new(Vec3::new(2.002, 0.002, 0.002), 0.01);
        let out = range_filter(&LidarScan::new(1.0, vec![a, b]), &s);
        assert_eq!(out.points, vec![a]);
    }

    #[test]
    fn sparse_scan_passes_through_minus_out_of_range() {
        let s = SensorModel::new(0.7854, 64, 10, 0.1).unwrap();
        let pts: Vec<_> = (0..8)
            .map(|i| RawPoint::new(Vec3::new(1.5 + i as f64, 0.3 * i as f64, -0.2), 0.0))
            .chain([
                RawPoint::new(Vec3::new(12.0, 0.0, 0.0), 0.0),
                RawPoint::new(Vec3::zeros(), 0.0),
                RawPoint::new(Vec3::new(f64::NAN, 1.0, 0.0), 0.0),
            ])
            .collect();
        let out = range_filter(&LidarScan::new(0.0, pts.clone()), &s);
        assert_eq!(out.points, pts[..8].to_vec());
        assert!(range_filter(&LidarScan::default(), &s).is_empty());
    }

    /// Independent oracle: explicit bin buckets and a BTreeMap of voxel keys.
    fn filter_oracle(points: &[RawPoint], s: &SensorModel) -> BTreeSet<(usize, [u64; 3])> {
        let mut per_bin: BTreeMap<usize, BTreeMap<[i64; 3], Vec3>> = BTreeMap::new();
        for p in points {
            let r = p.position.norm();
            if !(r > 0.0 && r < s.max_range as f64) {
                continue;
            }
            let b = r.floor() as usize;
            let v = (b as f64 + 1.0) * s.vertical_fov / (s.scan_lines as f64 - 1.0);
            let key = [
                (p.position.x / v).floor() as i64,
                (p.position.y / v).floor() as i64,
                (p.position.z / v).floor() as i64,
            ];
            per_bin.entry(b).or_default().entry(key).or_insert(p.position);
        }
        per_bin
            .into_iter()
            .flat_map(|(b, m)| {
                m.into_values()
                    .map(move |p| (b, [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
            })
            .collect()
    }

    fn as_set(scan: &LidarScan, s: &SensorModel) -> BTreeSet<(usize, [u64; 3])> {
        scan.points
            .iter()
            .map(|p| {
                let b = s.bin_index(&p.position).unwrap();
                (b, [p.position.x.to_bits(), p.position.y.to_bits(), p.position.z.to_bits()])
            })
            .collect()
    }

    #[test]
    fn dense_plane_matches_oracle() {
        let s = SensorModel::new(0.7854, 64, 30, 0.1).unwrap();
        let mut pts = Vec::new();
        for i in 0..200 {
            for j in 0..60 {
                let x = 0.5 + i as f64 * 0.07;
                let y = -3.0 + j as f64 * 0.1;
                pts.push(RawPoint::new(Vec3::new(x, y, -1.2), 0.0));
            }
        }
        let scan = LidarScan::new(0.0, pts);
        let out = range_filter(&scan, &s);
        assert!(out.len() < scan.len());
        assert_eq!(as_set(&out, &s), filter_oracle(&scan.points, &s));
    }

    fn raw_points() -> impl Strategy<Value = Vec<RawPoint>> {
        prop::collection::vec(
            (-15.0..15.0f64, -15.0..15.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| {
                // snap to a grid so that shared voxels actually occur
                RawPoint::new(
                    Vec3::new((x * 20.0).round() / 20.0, (y * 20.0).round() / 20.0, z),
                    0.0,
                )
            }),
            0..400,
        )
    }

    proptest! {
        #[test]
        fn filter_properties(pts in raw_points()) {
            let s = SensorModel::new(0.7854, 16, 12, 0.1).unwrap();
            let scan = LidarScan::new(0.0, pts);
            let once = range_filter(&scan, &s);
            prop_assert!(once.len() <= scan.len());
            prop_assert_eq!(&range_filter(&once, &s), &once);
            prop_assert_eq!(as_set(&once, &s), filter_oracle(&scan.points, &s));
            let mut keys = BTreeSet::new();
            for p in &once.points {
                let b = s.bin_index(&p.position).unwrap();
                prop_assert!(keys.insert((b, voxel_key(&p.position, s.bin_resolution(b)))));
            }
        }
    }

    fn history(poses: &[(f64, RigidTransform)]) -> PoseHistory {
        let mut h = PoseHistory::new();
        for (t, p) in poses {
            h.push(*t, *p);
        }
        h
    }

    #[test]
    fn stationary_deskew_is_identity() {
        let pose = RigidTransform::new(rot_exp(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        let h = history(&[(0.9, pose), (0.95, pose), (1.0, pose)]);
        let ext = RigidTransform::new(rot_exp(&Vec3::new(0.0, 0.0, 0.2)), Vec3::new(0.1, 0.0, 0.05));
        let scan = LidarScan::new(
            1.0,
            vec![
                RawPoint::new(Vec3::new(1.0, 2.0, 3.0), 0.0),
                RawPoint::new(Vec3::new(-4.0, 0.5, 1.0), 0.05),
            ],
        );
        let out = deskew(&scan, 0.1, &h, &ext).unwrap();
        assert_eq!(out.len(), scan.len());
        for (a, b) in out.points.iter().zip(&scan.points) {
            assert_relative_eq!(a.position, b.position, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_velocity_deskew_closed_form() {
        // IMU moves with velocity v under a fixed attitude R; LiDAR coincides with the IMU.
        let r = rot_exp(&Vec3::new(0.0, 0.0, 0.7));
        let v = Vec3::new(2.0, -1.0, 0.5);
        let (t0, tk) = (0.0, 0.1);
        let pose = |t: f64| RigidTransform::new(r, v * t);
        let h = history(&[(t0, pose(t0)), (0.05, pose(0.05)), (tk, pose(tk))]);
        let p = Vec3::new(3.0, 1.0, -0.5);
        let offset = 0.03;
        let scan = LidarScan::new(tk, vec![RawPoint::new(p, offset)]);
        let out = deskew(&scan, 0.1, &h, &RigidTransform::identity()).unwrap();
        let delta = tk - (t0 + offset);
        // world point R p + v t_j seen from the end pose: R^T (R p + v t_j - v t_k)
        let expected = p - r.inverse() * v * delta;
        assert_relative_eq!(out.points[0].position, expected, epsilon = 1e-12);
    }

    #[test]
    fn end_of_scan_point_is_unchanged() {
        let h = history(&[
            (0.0, RigidTransform::identity()),
            (0.1, RigidTransform::new(Rot3::from_axis_angle(&Vec3::z_axis(), 0.3), Vec3::x())),
        ]);
        let p = Vec3::new(1.0, 2.0, 3.0);
        let scan = LidarScan::new(0.1, vec![RawPoint::new(p, 0.1)]);
        let out = deskew(&scan, 0.1, &h, &RigidTransform::identity()).unwrap();
        assert_relative_eq!(out.points[0].position, p, epsilon = 1e-12);
    }

    #[test]
    fn uncovered_offset_is_an_error() {
        let h = history(&[(0.05, RigidTransform::identity()), (0.1, RigidTransform::identity())]);
        let scan = LidarScan::new(0.1, vec![RawPoint::new(Vec3::x(), 0.0)]);
        assert!(matches!(
            deskew(&scan, 0.1, &h, &RigidTransform::identity()),
            Err(PreprocessError::MissingStateCoverage { .. })
        ));
    }
}

//! Streaming odometry driver.
//!
//! IMU samples are buffered with [`Pipeline::push_imu`]; each scan handed to
//! [`Pipeline::process_scan`] is filtered, the state is propagated to its end
//! stamp, the points are deskewed, the iterated update registers them against
//! the map, and the map absorbs the scan at the updated pose. Until gravity
//! is initialized from quasi-static samples, scans are skipped.

use std::time::Instant;

use thiserror::Error;

use crate::config::{FilterMode, PipelineConfig};
use crate::estimator::{
    self, propagate_to, Covariance, EstimatorError, IekfConfig, ImuSample, NavState, TrajectoryOdometer,
};
use crate::geometry::{RigidTransform, Timestamp, Vec3};
use crate::map::GlobalMap;
use crate::preprocess::{self, LidarScan, PoseHistory, SensorModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("estimator diverged at t = {stamp:.3} s (position norm {norm:.1} m exceeds {bound:.1} m)")]
    Diverged { stamp: Timestamp, norm: f64, bound: f64 },
    #[error("IMU samples must arrive in increasing stamp order (got {got} after {last})")]
    UnorderedImu { got: Timestamp, last: Timestamp },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStatus {
    /// Gravity not initialized yet; the scan was skipped.
    Waiting,
    /// First scan after initialization; it seeded the map.
    Initialized,
    /// Registered against the map.
    Updated,
    /// Too few matches; the prediction was kept.
    Predicted,
}

impl ScanStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScanStatus::Waiting => "waiting",
            ScanStatus::Initialized => "initialized",
            ScanStatus::Updated => "updated",
            ScanStatus::Predicted => "predicted",
        }
    }
}

/// Per-scan diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub stamp: Timestamp,
    pub status: ScanStatus,
    /// `ᴳT_I` at the scan end, once initialized.
    pub pose: Option<RigidTransform>,
    pub raw_points: usize,
    pub filtered_points: usize,
    pub matches: usize,
    pub iterations: usize,
    pub converged: bool,
    pub observability_t: Vec3,
    pub observability_r: Vec3,
    pub eta: f64,
    pub psi: f64,
    pub mu: f64,
    pub residual_rms: f64,
    pub map_points: usize,
    pub elapsed: f64,
}

impl ScanReport {
    fn waiting(scan: &LidarScan) -> Self {
        Self {
            stamp: scan.stamp,
            status: ScanStatus::Waiting,
            pose: None,
            raw_points: scan.len(),
            filtered_points: 0,
            matches: 0,
            iterations: 0,
            converged: false,
            observability_t: Vec3::zeros(),
            observability_r: Vec3::zeros(),
            eta: 0.0,
            psi: 0.0,
            mu: 0.0,
            residual_rms: 0.0,
            map_points: 0,
            elapsed: 0.0,
        }
    }

    /// One `key=value` line; timing is left out when `with_timing` is false
    /// so deterministic runs stay reproducible.
    pub fn to_line(&self, with_timing: bool) -> String {
        let mut s = format!(
            "stamp={:.6} status={} raw={} filtered={} matches={} iterations={} converged={} obs_t={:.4},{:.4},{:.4} obs_r={:.4},{:.4},{:.4} eta={:.6} psi={:.6} mu={:.6} residual_rms={:.6} map={}",
            self.stamp,
            self.status.as_str(),
            self.raw_points,
            self.filtered_points,
            self.matches,
            self.iterations,
            self.converged as u8,
            self.observability_t.x,
            self.observability_t.y,
            self.observability_t.z,
            self.observability_r.x,
            self.observability_r.y,
            self.observability_r.z,
            self.eta,
            self.psi,
            self.mu,
            self.residual_rms,
            self.map_points
        );
        if with_timing {
            s.push_str(&format!(" ms={:.3}", self.elapsed * 1e3));
        }
        s
    }
}

#[derive(Debug, Clone)]
struct Filter {
    state: NavState,
    cov: Covariance,
    stamp: Timestamp,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    iekf: IekfConfig,
    sensor: SensorModel,
    imu_from_lidar: RigidTransform,
    imu: Vec<ImuSample>,
    filter: Option<Filter>,
    map: GlobalMap,
    odometer: TrajectoryOdometer,
    divergence_bound: Option<f64>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, sensor: SensorModel, imu_from_lidar: RigidTransform) -> Self {
        let iekf = config.estimator.iekf();
        let map = GlobalMap::new(config.map, sensor);
        Self {
            config,
            iekf,
            sensor,
            imu_from_lidar,
            imu: Vec::new(),
            filter: None,
            map,
            odometer: TrajectoryOdometer::new(),
            divergence_bound: None,
        }
    }

    /// Declares divergence beyond `bound` metres from the origin.
    pub fn with_divergence_bound(mut self, bound: f64) -> Self {
        self.divergence_bound = Some(bound);
        self
    }

    /// Disables the wall-time budget so results do not depend on timing.
    pub fn deterministic(mut self) -> Self {
        self.iekf.time_budget = None;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn map(&self) -> &GlobalMap {
        &self.map
    }

    pub fn state(&self) -> Option<&NavState> {
        self.filter.as_ref().map(|f| &f.state)
    }

    pub fn push_imu(&mut self, samples: &[ImuSample]) -> Result<(), PipelineError> {
        for s in samples {
            if let Some(last) = self.imu.last() {
                if s.stamp <= last.stamp {
                    return Err(PipelineError::UnorderedImu {
                        got: s.stamp,
                        last: last.stamp,
                    });
                }
            }
            self.imu.push(*s);
        }
        Ok(())
    }

    fn filter_scan(&self, scan: &LidarScan) -> LidarScan {
        match self.config.filter.mode {
            FilterMode::Range => preprocess::range_filter(scan, &self.sensor),
            FilterMode::Uniform => preprocess::uniform_filter(scan, &self.sensor, self.config.filter.uniform_resolution),
        }
    }

    /// Samples needed to propagate from `t`: the last one at or before `t`
    /// and everything after.
    fn imu_from(&self, t: Timestamp) -> &[ImuSample] {
        let k = self.imu.partition_point(|s| s.stamp <= t);
        &self.imu[k.saturating_sub(1)..]
    }

    fn try_initialize(&mut self, stamp: Timestamp) -> bool {
        let end = self.imu.partition_point(|s| s.stamp <= stamp);
        let init = match estimator::initialize_gravity(
            &self.imu[..end],
            self.config.init.min_samples,
            self.config.init.max_accel_variance,
        ) {
            Ok(g) => g,
            Err(_) => return false,
        };
        let state = NavState {
            gravity: init.gravity,
            gyro_bias: init.gyro_bias,
            accel_bias: init.accel_bias,
            ..NavState::default()
        };
        self.filter = Some(Filter {
            state,
            cov: self.config.estimator.initial.covariance(),
            stamp,
        });
        true
    }

    fn insert_scan(&mut self, points: &[Vec3], pose: &RigidTransform, stamp: Timestamp) -> usize {
        let mut bins = vec![Vec::new(); self.sensor.bin_count()];
        let world_from_lidar = *pose * self.imu_from_lidar;
        for p in points {
            if let Some(b) = self.sensor.bin_index(p) {
                bins[b].push(world_from_lidar.transform_point(p));
            }
        }
        let (added, _) = self.map.update(&bins, stamp, self.odometer.length());
        added.len()
    }

    fn check_divergence(&self, state: &NavState, stamp: Timestamp) -> Result<(), PipelineError> {
        let norm = state.position.norm();
        let bound = self.divergence_bound.unwrap_or(f64::INFINITY);
        if !state.is_finite() || norm > bound {
            return Err(PipelineError::Diverged { stamp, norm, bound });
        }
        Ok(())
    }

    pub fn process_scan(&mut self, scan: &LidarScan) -> Result<ScanReport, PipelineError> {
        let started = Instant::now();
        let mut report = ScanReport::waiting(scan);
        let filtered = self.filter_scan(scan);
        report.filtered_points = filtered.len();

        let Some(filter) = self.filter.clone() else {
            if !self.try_initialize(scan.stamp) {
                return Ok(report);
            }
            // the platform is static while initializing, so no deskew is needed
            let state = self.filter.as_ref().map(|f| f.state).unwrap_or_default();
            let points: Vec<Vec3> = filtered.points.iter().map(|p| p.position).collect();
            self.odometer.advance(&state.position);
            self.insert_scan(&points, &state.pose(), scan.stamp);
            report.status = ScanStatus::Initialized;
            report.pose = Some(state.pose());
            report.map_points = self.map.len();
            report.elapsed = started.elapsed().as_secs_f64();
            return Ok(report);
        };

        let mut history = PoseHistory::new();
        history.push(filter.stamp, filter.state.pose());
        let (predicted, predicted_cov) = propagate_to(
            &filter.state,
            &filter.cov,
            filter.stamp,
            self.imu_from(filter.stamp),
            scan.stamp,
            &self.config.estimator.imu_noise,
            |t, x| history.push(t, x.pose()),
        );
        self.check_divergence(&predicted, scan.stamp)?;

        let points: Vec<Vec3> = match preprocess::deskew(&filtered, self.sensor.scan_period, &history, &self.imu_from_lidar) {
            Ok(d) => d.points.iter().map(|p| p.position).collect(),
            Err(_) => filtered.points.iter().map(|p| p.position).collect(),
        };

        let (state, cov) = match estimator::iekf_update(
            &predicted,
            &predicted_cov,
            &points,
            &self.map,
            &self.odometer,
            &self.imu_from_lidar,
            &self.iekf,
        ) {
            Ok(out) => {
                report.status = ScanStatus::Updated;
                report.matches = out.matches;
                report.iterations = out.iterations;
                report.converged = out.converged;
                report.observability_t = out.report.translation;
                report.observability_r = out.report.rotation;
                report.eta = out.report.eta;
                report.psi = out.report.psi;
                report.mu = out.report.mu;
                report.residual_rms = out.residual_rms;
                (out.state, out.covariance)
            }
            Err(EstimatorError::InsufficientMatches { found, .. }) => {
                report.status = ScanStatus::Predicted;
                report.matches = found;
                (predicted, predicted_cov)
            }
            Err(e) => return Err(e.into()),
        };
        self.check_divergence(&state, scan.stamp)?;

        self.odometer.advance(&state.position);
        self.insert_scan(&points, &state.pose(), scan.stamp);
        self.filter = Some(Filter {
            state,
            cov,
            stamp: scan.stamp,
        });
        // samples older than the new state are no longer needed
        let keep = self.imu.partition_point(|s| s.stamp <= scan.stamp).saturating_sub(1);
        self.imu.drain(..keep);

        report.pose = Some(state.pose());
        report.map_points = self.map.len();
        report.elapsed = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{AnalyticTrajectory, Scene, Simulation};

    #[test]
    fn waits_for_static_samples_then_seeds_map() {
        let sensor = SensorModel::new(0.7854, 16, 40, 0.1).unwrap();
        let mut sim = Simulation::new(
            Scene::box_room(Vec3::new(8.0, 6.0, 3.0)),
            AnalyticTrajectory::stationary(Vec3::new(0.0, 0.0, 1.2), 0.0),
            sensor,
            0.6,
            5,
        );
        sim.lidar.beams = 256;
        let mut p = Pipeline::new(PipelineConfig::default(), sensor, RigidTransform::identity()).deterministic();
        p.push_imu(&sim.imu_samples()).unwrap();
        let statuses: Vec<ScanStatus> = (0..sim.scan_count())
            .map(|k| p.process_scan(&sim.scan(k)).unwrap().status)
            .collect();
        // 100 samples at 400 Hz are available after 0.25 s
        assert_eq!(statuses[0], ScanStatus::Waiting);
        assert_eq!(statuses[1], ScanStatus::Waiting);
        assert_eq!(statuses[2], ScanStatus::Initialized);
        // without travel every map point is too recent to match
        assert!(statuses[3..].iter().all(|s| *s == ScanStatus::Predicted), "{statuses:?}");
        let x = p.state().unwrap();
        assert!(x.position.norm() < 0.05, "{}", x.position);
        assert!(p.map().len() > 500);
    }

    #[test]
    fn rejects_unordered_imu() {
        let sensor = SensorModel::new(0.7854, 16, 40, 0.1).unwrap();
        let mut p = Pipeline::new(PipelineConfig::default(), sensor, RigidTransform::identity());
        p.push_imu(&[ImuSample::new(1.0, Vec3::zeros(), Vec3::z())]).unwrap();
        assert!(matches!(
            p.push_imu(&[ImuSample::new(0.5, Vec3::zeros(), Vec3::z())]),
            Err(PipelineError::UnorderedImu { .. })
        ));
    }

    #[test]
    fn report_line_format() {
        let r = ScanReport::waiting(&LidarScan::new(0.1, vec![]));
        let line = r.to_line(false);
        assert!(line.starts_with("stamp=0.100000 status=waiting raw=0"));
        assert!(!line.contains(" ms="));
        assert!(r.to_line(true).contains(" ms="));
    }
}

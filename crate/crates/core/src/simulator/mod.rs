//! Deterministic synthetic worlds, raycast LiDAR scans and analytic IMU
//! streams.
//!
//! Scans are rolling-shutter: column `j` of `beams` fires at offset
//! `j / beams · period` after the scan start, and the `β` lines of a column
//! span the vertical field of view symmetrically about the horizon. Beam
//! `(j, i)` draws its range noise from stream `scan_index`, counter
//! `j · β + i`, so every return can be regenerated independently.

pub mod noise;
pub mod scene;
pub mod trajectory;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExtrinsicConfig;
use crate::estimator::{ImuSample, GRAVITY_MAGNITUDE};
use crate::evaluation::Trajectory;
use crate::geometry::{RigidTransform, Timestamp, Vec3};
use crate::preprocess::{LidarScan, RawPoint, SensorModel};

pub use noise::CounterRng;
pub use scene::Scene;
pub use trajectory::AnalyticTrajectory;

/// Stream reserved for IMU noise; scan streams are the scan indices.
const IMU_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSimConfig {
    /// Columns per revolution.
    pub beams: usize,
    /// Standard deviation of additive range noise in metres.
    pub range_noise: f64,
    /// Returns closer than this are dropped.
    pub min_range: f64,
}

impl Default for LidarSimConfig {
    fn default() -> Self {
        Self {
            beams: 1024,
            range_noise: 0.01,
            min_range: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuSimConfig {
    pub rate: f64,
    /// White-noise densities; discrete std is `density · √rate`.
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

/// Consumer-grade MEMS figures: about 0.01 °/s/√Hz and 200 µg/√Hz.
impl Default for ImuSimConfig {
    fn default() -> Self {
        Self {
            rate: 400.0,
            gyro_noise: 2e-4,
            accel_noise: 2e-3,
            gyro_bias: [1e-3, -2e-3, 1.5e-3],
            accel_bias: [0.02, -0.03, 0.01],
        }
    }
}

impl ImuSimConfig {
    pub fn noiseless(rate: f64) -> Self {
        Self {
            rate,
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

fn beam_direction(column: usize, line: usize, beams: usize, sensor: &SensorModel) -> Vec3 {
    let az = std::f64::consts::TAU * column as f64 / beams as f64;
    let el = if sensor.scan_lines > 1 {
        -0.5 * sensor.vertical_fov + sensor.vertical_fov * line as f64 / (sensor.scan_lines - 1) as f64
    } else {
        0.0
    };
    let (se, ce) = el.sin_cos();
    let (sa, ca) = az.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

/// Raycasts one sweep starting at `t0`; points are in the LiDAR frame at
/// their capture instant, stamped with the scan end `t0 + period`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_scan(
    scene: &Scene,
    trajectory: &AnalyticTrajectory,
    t0: Timestamp,
    sensor: &SensorModel,
    imu_from_lidar: &RigidTransform,
    lidar: &LidarSimConfig,
    rng: &CounterRng,
    stream: u64,
) -> LidarScan {
    let lines = sensor.scan_lines as usize;
    let max_range = sensor.max_range as f64;
    let beams = lidar.beams.max(1);
    let points: Vec<RawPoint> = (0..beams)
        .into_par_iter()
        .flat_map_iter(|j| {
            let offset = j as f64 / beams as f64 * sensor.scan_period;
            let pose = trajectory.pose(t0 + offset) * *imu_from_lidar;
            (0..lines).filter_map(move |i| {
                let d = beam_direction(j, i, beams, sensor);
                let hit = scene.raycast(&pose.translation, &pose.rotation.transform_vector(&d))?;
                let noise = if lidar.range_noise > 0.0 {
                    lidar.range_noise * rng.gaussian(stream, (j * lines + i) as u64)
                } else {
                    0.0
                };
                let r = hit + noise;
                (r >= lidar.min_range && r > 0.0 && r < max_range).then(|| RawPoint::new(d * r, offset))
            })
        })
        .collect();
    LidarScan::new(t0 + sensor.scan_period, points)
}

/// Samples the IMU on `[t0, t1]` at `config.rate`.
///
/// `ω` is the body rate and `a = Rᵀ(v̇ − γ) + b_a + n_a`.
pub fn simulate_imu(
    trajectory: &AnalyticTrajectory,
    t0: Timestamp,
    t1: Timestamp,
    gravity: &Vec3,
    config: &ImuSimConfig,
    rng: &CounterRng,
) -> Vec<ImuSample> {
    let dt = 1.0 / config.rate;
    let n = ((t1 - t0) * config.rate + 1e-9).floor() as u64;
    let sg = config.gyro_noise * config.rate.sqrt();
    let sa = config.accel_noise * config.rate.sqrt();
    let bg = Vec3::from(config.gyro_bias);
    let ba = Vec3::from(config.accel_bias);
    (0..=n)
        .map(|k| {
            let t = t0 + k as f64 * dt;
            let kin = trajectory.kinematics(t);
            let draw = |axis: u64, s: f64| {
                if s > 0.0 {
                    s * rng.gaussian(IMU_STREAM, k * 6 + axis)
                } else {
                    0.0
                }
            };
            let w = kin.angular_velocity + bg + Vec3::new(draw(0, sg), draw(1, sg), draw(2, sg));
            let a = kin.rotation.inverse() * (kin.acceleration - gravity)
                + ba
                + Vec3::new(draw(3, sa), draw(4, sa), draw(5, sa));
            ImuSample::new(t, w, a)
        })
        .collect()
}

/// Sequence-level simulation settings, loadable from TOML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub duration: f64,
    pub seed: u64,
    pub sensor: SensorModel,
    pub lidar: LidarSimConfig,
    pub imu: ImuSimConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<ExtrinsicConfig>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            duration: 20.0,
            seed: 0,
            sensor: SensorModel {
                vertical_fov: std::f64::consts::FRAC_PI_4,
                scan_lines: 32,
                max_range: 40,
                scan_period: 0.1,
            },
            lidar: LidarSimConfig::default(),
            imu: ImuSimConfig::default(),
            extrinsic: None,
        }
    }
}

impl SimSettings {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let s: SimSettings = toml::from_str(text).map_err(|e| e.to_string())?;
        s.sensor.validate().map_err(|e| format!("sensor: {e}"))?;
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(format!("duration must be positive, got {}", s.duration));
        }
        if s.lidar.beams == 0 {
            return Err("lidar.beams must be at least 1".into());
        }
        if !(s.imu.rate > 0.0 && s.imu.rate.is_finite()) {
            return Err(format!("imu.rate must be positive, got {}", s.imu.rate));
        }
        if let Some(e) = &s.extrinsic {
            e.transform().map_err(|e| e.to_string())?;
        }
        Ok(s)
    }
}

/// A complete synthetic sequence, generated on demand.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: Scene,
    pub trajectory: AnalyticTrajectory,
    pub sensor: SensorModel,
    pub imu_from_lidar: RigidTransform,
    pub lidar: LidarSimConfig,
    pub imu: ImuSimConfig,
    pub duration: f64,
    pub gravity: Vec3,
    pub seed: u64,
}

impl Simulation {
    pub fn new(scene: Scene, trajectory: AnalyticTrajectory, sensor: SensorModel, duration: f64, seed: u64) -> Self {
        Self {
            scene,
            trajectory,
            sensor,
            imu_from_lidar: RigidTransform::identity(),
            lidar: LidarSimConfig::default(),
            imu: ImuSimConfig::default(),
            duration,
            gravity: Vec3::new(0.0, 0.0, -GRAVITY_MAGNITUDE),
            seed,
        }
    }

    pub fn from_settings(scene: Scene, trajectory: AnalyticTrajectory, settings: &SimSettings) -> Self {
        let mut sim = Self::new(scene, trajectory, settings.sensor, settings.duration, settings.seed);
        sim.lidar = settings.lidar;
        sim.imu = settings.imu;
        if let Some(e) = &settings.extrinsic {
            sim.imu_from_lidar = e.transform().unwrap_or_default();
        }
        sim
    }

    /// Scan-end stamps at which the LiDAR lies outside the scene bounds.
    pub fn out_of_bounds(&self) -> Vec<Timestamp> {
        let Some((lo, hi)) = self.scene.bounds() else {
            return Vec::new();
        };
        (0..self.scan_count())
            .map(|k| (k + 1) as f64 * self.sensor.scan_period)
            .filter(|&t| {
                let p = (self.trajectory.pose(t) * self.imu_from_lidar).translation;
                (0..3).any(|i| p[i] < lo[i] || p[i] > hi[i])
            })
            .collect()
    }

    fn rng(&self) -> CounterRng {
        CounterRng::new(self.seed)
    }

    pub fn scan_count(&self) -> usize {
        (self.duration / self.sensor.scan_period + 1e-9).floor() as usize
    }

    /// Scan `k` covers `[k·period, (k+1)·period]`.
    pub fn scan(&self, k: usize) -> LidarScan {
        simulate_scan(
            &self.scene,
            &self.trajectory,
            k as f64 * self.sensor.scan_period,
            &self.sensor,
            &self.imu_from_lidar,
            &self.lidar,
            &self.rng(),
            k as u64,
        )
    }

    pub fn imu_samples(&self) -> Vec<ImuSample> {
        simulate_imu(&self.trajectory, 0.0, self.duration, &self.gravity, &self.imu, &self.rng())
    }

    /// IMU poses at every scan-end stamp.
    pub fn ground_truth(&self) -> Trajectory {
        let mut t = Trajectory::default();
        for k in 0..self.scan_count() {
            let stamp = (k + 1) as f64 * self.sensor.scan_period;
            t.push(stamp, self.trajectory.pose(stamp));
        }
        t
    }
}

//! Pipeline configuration.
//!
//! Parsed from TOML with unknown keys rejected. Every field has a default, so
//! an empty file is a valid configuration:
//!
//! ```toml
//! seed = 0
//! divergence_factor = 10.0
//!
//! [filter]
//! mode = "range"              # or "uniform"
//! uniform_resolution = 0.1
//!
//! [map]
//! resolution = 0.1
//! rho_max = 6
//! n_min = 6
//! n_max = 60
//!
//! [estimator]
//! lidar_std = 0.02
//! convergence = 1e-4
//! max_iterations = 10
//! time_budget = 0.05          # seconds, 0 disables
//! min_matches = 20
//! metric = "ellipsoid"        # or "point_to_point"
//! weighting = "adaptive"      # or "constant"
//!
//! [init]
//! min_samples = 100
//! max_accel_variance = 0.5
//! ```
//!
//! Optional `[sensor]` and `[extrinsic]` tables override the sequence
//! manifest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{IekfConfig, ImuNoise, InitialUncertainty, Weighting};
use crate::geometry::{RigidTransform, Vec3};
use crate::map::MapConfig;
use crate::preprocess::SensorModel;
use crate::registration::Metric;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    Range,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub uniform_resolution: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Range,
            uniform_resolution: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub lidar_std: f64,
    pub convergence: f64,
    pub max_iterations: usize,
    pub time_budget: f64,
    pub min_matches: usize,
    pub metric: Metric,
    pub weighting: Weighting,
    pub imu_noise: ImuNoise,
    pub initial: InitialUncertainty,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let k = IekfConfig::default();
        Self {
            lidar_std: k.lidar_std,
            convergence: k.convergence,
            max_iterations: k.max_iterations,
            time_budget: k.time_budget.unwrap_or(0.0),
            min_matches: k.min_matches,
            metric: k.metric,
            weighting: k.weighting,
            imu_noise: ImuNoise::default(),
            initial: InitialUncertainty::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn iekf(&self) -> IekfConfig {
        IekfConfig {
            lidar_std: self.lidar_std,
            convergence: self.convergence,
            max_iterations: self.max_iterations,
            time_budget: (self.time_budget > 0.0).then_some(self.time_budget),
            min_matches: self.min_matches,
            metric: self.metric,
            weighting: self.weighting,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Quasi-static IMU samples required before the first scan is used.
    pub min_samples: usize,
    /// Largest per-axis accelerometer variance accepted as static.
    pub max_accel_variance: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            min_samples: 100,
            max_accel_variance: 0.5,
        }
    }
}

/// `ᴵT_L` as translation plus a unit quaternion `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicConfig {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl ExtrinsicConfig {
    pub fn from_transform(t: &RigidTransform) -> Self {
        Self {
            translation: t.translation.into(),
            rotation: t.quaternion_xyzw(),
        }
    }

    pub fn transform(&self) -> Result<RigidTransform, ConfigError> {
        RigidTransform::from_quaternion_xyzw(Vec3::from(self.translation), self.rotation).ok_or(
            ConfigError::Invalid {
                field: "extrinsic.rotation",
                message: "quaternion must be non-zero".into(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Divergence is declared when the position norm exceeds this multiple of
    /// the scene diameter.
    pub divergence_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensor: Option<SensorModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<ExtrinsicConfig>,
    pub filter: FilterConfig,
    pub map: MapConfig,
    pub estimator: EstimatorConfig,
    pub init: InitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            divergence_factor: 10.0,
            sensor: None,
            extrinsic: None,
            filter: FilterConfig::default(),
            map: MapConfig::default(),
            estimator: EstimatorConfig::default(),
            init: InitConfig::default(),
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            field,
            message: format!("must be positive, got {v}"),
        })
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("divergence_factor", self.divergence_factor)?;
        positive("filter.uniform_resolution", self.filter.uniform_resolution)?;
        positive("map.resolution", self.map.resolution)?;
        positive("estimator.lidar_std", self.estimator.lidar_std)?;
        positive("estimator.convergence", self.estimator.convergence)?;
        if self.map.rho_max == 0 {
            return Err(ConfigError::Invalid {
                field: "map.rho_max",
                message: "must be at least 1".into(),
            });
        }
        if self.map.n_max < self.map.n_min {
            return Err(ConfigError::Invalid {
                field: "map.n_max",
                message: format!("must be at least n_min = {}", self.map.n_min),
            });
        }
        if self.estimator.max_iterations == 0 {
            return Err(ConfigError::Invalid {
                field: "estimator.max_iterations",
                message: "must be at least 1".into(),
            });
        }
        if !(self.estimator.time_budget >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "estimator.time_budget",
                message: "must be non-negative".into(),
            });
        }
        if let Some(s) = &self.sensor {
            s.validate().map_err(|e| ConfigError::Invalid {
                field: "sensor",
                message: e.to_string(),
            })?;
        }
        if let Some(e) = &self.extrinsic {
            e.transform()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.map.resolution, 0.1);
        assert_eq!(c.map.rho_max, 6);
        assert_eq!(c.map.n_min, 6);
        assert_eq!(c.map.n_max, 60);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("sede = 3").is_err());
        let err = PipelineConfig::from_toml("[map]\nresolutoin = 0.2").unwrap_err().to_string();
        assert!(err.contains("resolutoin"), "{err}");
        assert!(PipelineConfig::from_toml("[estimator.imu_noise]\ngyro = 1e-3\nfoo = 1").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = PipelineConfig::default();
        c.sensor = Some(SensorModel::new(0.5, 16, 40, 0.1).unwrap());
        c.extrinsic = Some(ExtrinsicConfig {
            translation: [0.0, 0.0, 0.1],
            rotation: [0.0, 0.0, 0.0, 1.0],
        });
        c.estimator.metric = Metric::PointToPoint;
        c.filter.mode = FilterMode::Uniform;
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_toml().contains("metric = \"point_to_point\""));
    }

    #[test]
    fn invalid_values_named() {
        let err = PipelineConfig::from_toml("[map]\nresolution = -1").unwrap_err().to_string();
        assert!(err.contains("map.resolution"), "{err}");
        let err = PipelineConfig::from_toml("[map]\nn_min = 10\nn_max = 5").unwrap_err().to_string();
        assert!(err.contains("n_max"), "{err}");
        assert_eq!(PipelineConfig::from_toml("[estimator]\ntime_budget = 0").unwrap().estimator.iekf().time_budget, None);
    }
}

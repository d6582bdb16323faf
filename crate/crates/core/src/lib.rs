//! LiDAR-inertial odometry with range-adaptive scan filtering, an iterated
//! error-state Kalman filter, ellipsoid-adaptive scan-to-map registration and
//! incremental tensor-voting maps.

pub mod config;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod map;
pub mod pipeline;
pub mod preprocess;
pub mod registration;
pub mod simulator;
pub mod tensor_voting;
pub mod voxel_index;

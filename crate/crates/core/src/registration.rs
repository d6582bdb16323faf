//! Scan-to-map matching with ellipsoid-adaptive targets, measurement rows,
//! travel-distance match weights and observability-based weight penalties.

use rayon::prelude::*;
use thiserror::Error;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_between, RigidTransform, Rot3, Vec3};
use crate::map::GlobalMap;
use crate::tensor_voting::Ellipsoid;
use crate::voxel_index::PointId;

/// Residuals at or below this norm carry no direction.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RegistrationError {
    #[error("ellipsoid has zero total saliency")]
    ZeroSaliency,
    #[error("scan point coincides with its target")]
    DegenerateResidual,
}

/// Error metric used to build the target point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Saliency-weighted line, plane and ball projections.
    #[default]
    Ellipsoid,
    /// Target is always the matched map point.
    PointToPoint,
}

/// One registration constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRow {
    /// Scan point in the global frame.
    pub scan_point: Vec3,
    /// Scan point in the IMU frame.
    pub imu_point: Vec3,
    pub map_point: PointId,
    pub target: Vec3,
    /// `−‖p − p′‖`.
    pub residual: f64,
    /// Unit direction from target to scan point, global frame.
    pub translation: Vec3,
    /// Rotation component of the measurement row, IMU frame.
    pub rotation: Vec3,
    /// Unscaled match weight.
    pub weight: f64,
    /// `g_plane / ‖g‖₁` of the matched ellipsoid.
    pub plane_fraction: f64,
}

/// Nearest-neighbour radius at an iEKF iteration: `max(r_bin / (1 + it), φ)`.
pub fn match_radius(bin_radius: f64, iteration: usize, resolution: f64) -> f64 {
    (bin_radius / (1 + iteration) as f64).max(resolution)
}

/// Closest usable map point for a global-frame scan point whose LiDAR range
/// falls in `bin`. Candidates without an ellipsoid, or captured less than the
/// search radius of travel ago, are rejected.
pub fn find_match(
    map: &GlobalMap,
    p: &Vec3,
    bin: usize,
    iteration: usize,
    s_now: f64,
) -> Option<PointId> {
    let r = match_radius(map.search_radius(bin), iteration, map.config().resolution);
    let (id, _) = map.index().nearest_within(p, r)?;
    let q = map.point(id);
    q.ellipsoid?;
    if s_now - q.capture_traj_len < r {
        return None;
    }
    Some(id)
}

/// Saliency-weighted combination of the line, plane and ball projections of
/// `p` relative to map point `q`.
pub fn target_point(p: &Vec3, q: &Vec3, e: &Ellipsoid) -> Result<Vec3, RegistrationError> {
    let g = e.saliency;
    let total = g.l1();
    if !(total > 0.0) {
        return Err(RegistrationError::ZeroSaliency);
    }
    let d = p - q;
    let v3 = e.principal();
    let v1 = e.normal();
    let line = q + v3 * d.dot(&v3);
    let plane = p - v1 * d.dot(&v1);
    Ok((line * g.line() + plane * g.plane() + q * g.ball()) / total)
}

/// Residual `z`, translation direction `t` and rotation component `r` for a
/// match under the IMU pose `ᴳT_I`.
pub fn residual_row(
    p: &Vec3,
    target: &Vec3,
    imu_pose: &RigidTransform,
) -> Result<(f64, Vec3, Vec3), RegistrationError> {
    let diff = p - target;
    let n = diff.norm();
    if !(n > RESIDUAL_TOLERANCE) {
        return Err(RegistrationError::DegenerateResidual);
    }
    let t = diff / n;
    let inv = imu_pose.inverse();
    let r = inv.transform_point(p).cross(&inv.transform_vector(&t));
    Ok((-n, t, r))
}

/// `(Δs + 1) / max(1 − |t̂·γ̂|, 1e-4)`.
pub fn match_weight(s_p: f64, s_q: f64, t_hat: &Vec3, gravity_dir: &Vec3) -> f64 {
    (s_p - s_q + 1.0) / (1.0 - t_hat.dot(gravity_dir).abs()).max(1e-4)
}

/// Scan state needed to build rows.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub map: &'a GlobalMap,
    pub imu_pose: RigidTransform,
    pub imu_from_lidar: RigidTransform,
    pub iteration: usize,
    pub s_now: f64,
    pub gravity_dir: Vec3,
    pub metric: Metric,
}

/// Matches every LiDAR-frame point against the map. Points are processed in
/// parallel; the output keeps input order.
pub fn build_rows(points: &[Vec3], ctx: &RowContext<'_>) -> Vec<MatchRow> {
    let sensor = ctx.map.sensor();
    points
        .par_iter()
        .filter_map(|lp| {
            let bin = sensor.bin_index(lp)?;
            let imu_point = ctx.imu_from_lidar.transform_point(lp);
            let p = ctx.imu_pose.transform_point(&imu_point);
            let id = find_match(ctx.map, &p, bin, ctx.iteration, ctx.s_now)?;
            let mp = ctx.map.point(id);
            let e = mp.ellipsoid?;
            let target = match ctx.metric {
                Metric::Ellipsoid => target_point(&p, &mp.position, &e).ok()?,
                Metric::PointToPoint => mp.position,
            };
            let (residual, translation, rotation) = residual_row(&p, &target, &ctx.imu_pose).ok()?;
            let total = e.saliency.l1();
            Some(MatchRow {
                scan_point: p,
                imu_point,
                map_point: id,
                target,
                residual,
                translation,
                rotation,
                weight: match_weight(ctx.s_now, mp.capture_traj_len, &translation, &ctx.gravity_dir),
                plane_fraction: if total > 0.0 { e.saliency.plane() / total } else { 0.0 },
            })
        })
        .collect()
}

/// Rotation from the global frame to the gravity-aligned frame: takes `γ̂`
/// to `−e_z` along the shortest arc.
pub fn gravity_aligned_rotation(gravity_dir: &Vec3) -> Rot3 {
    rotation_between(gravity_dir, &-Vec3::z())
}

/// Per-axis variance of a point set.
pub fn scan_covariance_diag(points: impl IntoIterator<Item = Vec3>) -> Vec3 {
    let mut n = 0usize;
    let mut sum = Vec3::zeros();
    let mut sq = Vec3::zeros();
    for p in points {
        n += 1;
        sum += p;
        sq += p.component_mul(&p);
    }
    if n == 0 {
        return Vec3::zeros();
    }
    let mean = sum / n as f64;
    (sq / n as f64 - mean.component_mul(&mean)).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObservabilityReport {
    pub translation: Vec3,
    pub rotation: Vec3,
    /// `min(oᵗ)·min(oʳ)`.
    pub eta: f64,
    /// Vertical-velocity penalty.
    pub psi: f64,
    /// Mean-range penalty.
    pub mu: f64,
}

impl ObservabilityReport {
    pub fn exponent(&self) -> f64 {
        self.eta * self.psi * self.mu
    }
}

/// Keeps only the maximal components of `v` (all of them on exact ties).
pub fn mask_to_max(v: &Vec3) -> Vec3 {
    let m = v.max();
    v.map(|x| if x == m { x } else { 0.0 })
}

fn normalize_by_max(v: Vec3) -> Vec3 {
    let m = v.max();
    if m > 0.0 {
        v / m
    } else {
        Vec3::zeros()
    }
}

/// Translation and rotation observability over a match set.
///
/// `cov_diag` is the scan covariance diagonal in the gravity-aligned frame,
/// `gamma_from_global` the rotation into that frame and `imu_rotation`
/// the current `ᴳR_I`.
pub fn observability(
    rows: &[MatchRow],
    cov_diag: &Vec3,
    imu_rotation: &Rot3,
    gamma_from_global: &Rot3,
) -> (Vec3, Vec3) {
    let cmax = cov_diag.max();
    let c = if cmax > 0.0 { cov_diag / cmax } else { Vec3::zeros() };
    let mut ot = Vec3::zeros();
    let mut or = Vec3::zeros();
    for row in rows {
        let t = (gamma_from_global * row.translation).abs();
        ot += mask_to_max(&(c.component_mul(&t) * row.plane_fraction.powi(2)));
        let n = row.rotation.norm();
        if n > 0.0 {
            let r = (gamma_from_global * (imu_rotation * (row.rotation / n))).abs();
            or += mask_to_max(&r);
        }
    }
    (normalize_by_max(ot), normalize_by_max(or))
}

/// `1 − min(|ν·γ̂|, 1)`.
pub fn vertical_velocity_penalty(velocity: &Vec3, gravity_dir: &Vec3) -> f64 {
    1.0 - velocity.dot(gravity_dir).abs().min(1.0)
}

/// `min(0.1·range, 1)`.
pub fn range_penalty(mean_range: f64) -> f64 {
    (0.1 * mean_range).clamp(0.0, 1.0)
}

/// Full report including penalties.
pub fn observability_report(
    rows: &[MatchRow],
    cov_diag: &Vec3,
    imu_rotation: &Rot3,
    gamma_from_global: &Rot3,
    velocity: &Vec3,
    gravity_dir: &Vec3,
    mean_range: f64,
) -> ObservabilityReport {
    let (translation, rotation) = observability(rows, cov_diag, imu_rotation, gamma_from_global);
    ObservabilityReport {
        translation,
        rotation,
        eta: translation.min() * rotation.min(),
        psi: vertical_velocity_penalty(velocity, gravity_dir),
        mu: range_penalty(mean_range),
    }
}

/// Clamps weights to mean ± population std, shifts the minimum to 1 and
/// raises each to `exponent`.
pub fn scale_weights(weights: &[f64], exponent: f64) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let clamped: Vec<f64> = weights.iter().map(|w| w.clamp(mean - std, mean + std)).collect();
    let min = clamped.iter().copied().fold(f64::INFINITY, f64::min);
    clamped.iter().map(|w| (w - min + 1.0).powf(exponent)).collect()
}

//! Trajectory association, rigid alignment and absolute pose error.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{rot_log, RigidTransform, Rot3, Timestamp, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("trajectories share no poses within {max_dt} s")]
    NoOverlap { max_dt: f64 },
    #[error("alignment needs at least three non-collinear positions")]
    DegenerateGeometry,
}

pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Time-stamped poses, stamps strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<(Timestamp, RigidTransform)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(Timestamp, RigidTransform)>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push(&mut self, stamp: Timestamp, pose: RigidTransform) {
        self.poses.push((stamp, pose));
    }

    pub fn stamps_increasing(&self) -> bool {
        self.poses.windows(2).all(|w| w[0].0 < w[1].0)
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &RigidTransform) -> Trajectory {
        Trajectory::new(self.poses.iter().map(|(s, p)| (*s, t * p)).collect())
    }
}

/// Corresponding estimate and ground-truth poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub stamp: Timestamp,
    pub estimate: RigidTransform,
    pub truth: RigidTransform,
}

/// Pairs each estimate, in order, with the nearest unused ground-truth pose
/// within `max_dt`. Ties go to the earlier ground-truth pose.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<PosePair>, EvalError> {
    let mut used = vec![false; gt.poses.len()];
    let mut pairs = Vec::new();
    for &(t, pose) in &est.poses {
        // gt is sorted: find the insertion point and scan outwards
        let start = gt.poses.partition_point(|(s, _)| *s < t - max_dt);
        let mut best: Option<(usize, f64)> = None;
        for (j, (s, _)) in gt.poses.iter().enumerate().skip(start) {
            if *s > t + max_dt {
                break;
            }
            let d = (s - t).abs();
            if !used[j] && d <= max_dt && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push(PosePair {
                stamp: t,
                estimate: pose,
                truth: gt.poses[j].1,
            });
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { max_dt });
    }
    Ok(pairs)
}

/// Least-squares rigid transform `T` minimising `Σ‖T·p_est − p_gt‖²`.
pub fn umeyama_align(pairs: &[PosePair]) -> Result<RigidTransform, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|p| p.estimate.translation).sum::<Vec3>() / n;
    let mu_g = pairs.iter().map(|p| p.truth.translation).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    for p in pairs {
        let e = p.estimate.translation - mu_e;
        let g = p.truth.translation - mu_g;
        cov += g * e.transpose();
        spread_e += e * e.transpose();
    }
    cov /= n;
    // a rank below two leaves the rotation about the line undetermined
    let sv = spread_e.symmetric_eigen().eigenvalues;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0].max(1e-300) {
        return Err(EvalError::DegenerateGeometry);
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(EvalError::DegenerateGeometry)?;
    let vt = svd.v_t.ok_or(EvalError::DegenerateGeometry)?;
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let rot = Rot3::from_matrix_unchecked(r);
    Ok(RigidTransform::new(rot, mu_g - rot * mu_e))
}

/// Translational RMSE after applying `alignment` to the estimates.
pub fn ape_rmse(pairs: &[PosePair], alignment: &RigidTransform) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sq: f64 = pairs
        .iter()
        .map(|p| (alignment.transform_point(&p.estimate.translation) - p.truth.translation).norm_squared())
        .sum();
    (sq / pairs.len() as f64).sqrt()
}

/// Rotational RMSE in radians after alignment.
pub fn rotation_ape_rmse(pairs: &[PosePair], alignment: &RigidTransform) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sq: f64 = pairs
        .iter()
        .map(|p| {
            let r = (alignment.rotation * p.estimate.rotation).inverse() * p.truth.rotation;
            rot_log(&r).norm_squared()
        })
        .sum();
    (sq / pairs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApeReport {
    pub pairs: usize,
    pub rmse: f64,
    pub rotation_rmse: f64,
    pub alignment: RigidTransform,
}

/// Associate, align and score.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<ApeReport, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let alignment = umeyama_align(&pairs)?;
    Ok(ApeReport {
        pairs: pairs.len(),
        rmse: ape_rmse(&pairs, &alignment),
        rotation_rmse: rotation_ape_rmse(&pairs, &alignment),
        alignment,
    })
}

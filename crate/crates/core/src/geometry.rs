//! Geometry and time primitives shared by every stage of the pipeline.
//!
//! Vectors and rotations are thin aliases over `nalgebra` types; the manifold
//! operators (`rot_exp`, `rot_log`) and the rigid transform are implemented
//! here so that their numerical behaviour near the singular points is under
//! our control.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rot3 = Rotation3<f64>;

/// Seconds on the sequence clock.
pub type Timestamp = f64;

const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map from an axis-angle vector to a rotation.
pub fn rot_exp(axis_angle: &Vec3) -> Rot3 {
    let theta2 = axis_angle.norm_squared();
    let k = skew(axis_angle);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rot3::from_matrix_unchecked(Mat3::identity() + k * a + k * k * b)
}

/// Logarithm map, the inverse of [`rot_exp`] for angles below pi.
///
/// Goes through the unit quaternion so that both the small-angle and the
/// near-pi regimes stay well conditioned.
pub fn rot_log(rotation: &Rot3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(rotation);
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < SMALL_ANGLE {
        // 2 atan(n / w) / n ~= 2 / w for tiny n
        return v * (2.0 / w);
    }
    v * (2.0 * n.atan2(w) / n)
}

/// Rigid body transform `p -> R p + t` between two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rot3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rot3::identity(), translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let r_inv = self.rotation.inverse();
        RigidTransform::new(r_inv, -(r_inv * self.translation))
    }

    /// Geodesic interpolation: linear in translation, constant-rate in rotation.
    pub fn interpolate(&self, other: &RigidTransform, alpha: f64) -> RigidTransform {
        let delta = rot_log(&(self.rotation.inverse() * other.rotation));
        RigidTransform::new(
            self.rotation * rot_exp(&(delta * alpha)),
            self.translation + (other.translation - self.translation) * alpha,
        )
    }

    /// Unit quaternion `[x, y, z, w]` with a non-negative scalar part.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// Builds a transform from a translation and an `[x, y, z, w]` quaternion.
    /// The quaternion is normalized; `None` if it has zero norm.
    pub fn from_quaternion_xyzw(translation: Vec3, q: [f64; 4]) -> Option<RigidTransform> {
        let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = raw.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        let unit = UnitQuaternion::from_quaternion(raw);
        Some(RigidTransform::new(unit.to_rotation_matrix(), translation))
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Rotation taking unit vector `from` onto unit vector `to` along the shortest arc.
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Rot3 {
    let a = from.normalize();
    let b = to.normalize();
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    if s < 1e-12 {
        if c > 0.0 {
            return Rot3::identity();
        }
        // antiparallel: half turn about any axis orthogonal to `a`
        let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let ortho = a.cross(&helper).normalize();
        return rot_exp(&(ortho * std::f64::consts::PI));
    }
    rot_exp(&(axis / s * s.atan2(c)))
}

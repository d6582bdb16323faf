//! Analytic, twice-differentiable sensor trajectories.
//!
//! A trajectory is a planar path `P(φ)` with optional height, roll and pitch
//! sinusoids in the path parameter, traversed with a time warp `φ(t)` that
//! rests, ramps smoothly up to a cruise rate and then holds it. Velocities,
//! accelerations and body rates are evaluated in closed form.

use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Rot3, Timestamp, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Path {
    /// `c + (a cos φ, b sin φ, 0)`.
    Ellipse { center: [f64; 3], semi_axes: [f64; 2] },
    /// `c + (a_x sin(f_x φ + δ), a_y sin(f_y φ), 0)`.
    Lissajous {
        center: [f64; 3],
        amplitude: [f64; 2],
        frequency: [f64; 2],
        phase: f64,
    },
    Static { point: [f64; 3] },
}

impl Path {
    /// Position and first two parameter derivatives.
    fn eval(&self, phi: f64) -> [Vec3; 3] {
        match *self {
            Path::Ellipse { center, semi_axes: [a, b] } => {
                let (s, c) = phi.sin_cos();
                [
                    Vec3::from(center) + Vec3::new(a * c, b * s, 0.0),
                    Vec3::new(-a * s, b * c, 0.0),
                    Vec3::new(-a * c, -b * s, 0.0),
                ]
            }
            Path::Lissajous { center, amplitude: [ax, ay], frequency: [fx, fy], phase } => {
                let (sx, cx) = (fx * phi + phase).sin_cos();
                let (sy, cy) = (fy * phi).sin_cos();
                [
                    Vec3::from(center) + Vec3::new(ax * sx, ay * sy, 0.0),
                    Vec3::new(ax * fx * cx, ay * fy * cy, 0.0),
                    Vec3::new(-ax * fx * fx * sx, -ay * fy * fy * sy, 0.0),
                ]
            }
            Path::Static { point } => [Vec3::from(point), Vec3::zeros(), Vec3::zeros()],
        }
    }
}

/// `A sin(k φ + δ)` with its first two derivatives in `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Wobble {
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl Wobble {
    fn eval(&self, phi: f64) -> [f64; 3] {
        let (s, c) = (self.cycles * phi + self.phase).sin_cos();
        let a = self.amplitude;
        let k = self.cycles;
        [a * s, a * k * c, -a * k * k * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    /// Yaw follows the horizontal path tangent.
    Tangent,
    /// Constant yaw in radians.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticTrajectory {
    pub path: Path,
    pub heading: Heading,
    #[serde(default)]
    pub height: Wobble,
    #[serde(default)]
    pub roll: Wobble,
    #[serde(default)]
    pub pitch: Wobble,
    /// Seconds at rest before moving.
    #[serde(default)]
    pub rest: f64,
    /// Duration of the smooth ramp to the cruise rate.
    #[serde(default = "default_ramp")]
    pub ramp: f64,
    /// Cruise rate of the path parameter in rad/s.
    #[serde(default)]
    pub rate: f64,
    /// Path parameter at rest.
    #[serde(default)]
    pub start: f64,
}

fn default_ramp() -> f64 {
    1.0
}

/// Full kinematic state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub rotation: Rot3,
    /// Body-frame angular velocity.
    pub angular_velocity: Vec3,
}

fn zyx(yaw: f64, pitch: f64, roll: f64) -> Rot3 {
    Rot3::from_euler_angles(roll, pitch, yaw)
}

impl AnalyticTrajectory {
    /// Stationary trajectory at `point` with heading `yaw`.
    pub fn stationary(point: Vec3, yaw: f64) -> Self {
        Self {
            path: Path::Static { point: point.into() },
            heading: Heading::Fixed(yaw),
            height: Wobble::default(),
            roll: Wobble::default(),
            pitch: Wobble::default(),
            rest: 0.0,
            ramp: 1.0,
            rate: 0.0,
            start: 0.0,
        }
    }

    /// `(φ, φ̇, φ̈)` at time `t`.
    pub fn warp(&self, t: Timestamp) -> [f64; 3] {
        let ramp = self.ramp.max(1e-9);
        let x = (t - self.rest) / ramp;
        if x <= 0.0 {
            [self.start, 0.0, 0.0]
        } else if x < 1.0 {
            let x2 = x * x;
            [
                self.start + self.rate * ramp * (x2 * x - 0.5 * x2 * x2),
                self.rate * (3.0 * x2 - 2.0 * x2 * x),
                self.rate * 6.0 * x * (1.0 - x) / ramp,
            ]
        } else {
            [
                self.start + self.rate * ramp * 0.5 + self.rate * (t - self.rest - ramp),
                self.rate,
                0.0,
            ]
        }
    }

    /// Average cruise speed over one revolution of the path parameter.
    pub fn cruise_speed(&self) -> f64 {
        let n = 720;
        (0..n)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / n as f64;
                let [_, d, _] = self.path.eval(phi);
                let dz = self.height.eval(phi)[1];
                (d + Vec3::new(0.0, 0.0, dz)).norm()
            })
            .sum::<f64>()
            / n as f64
            * self.rate.abs()
    }

    /// Sets the cruise rate so the average speed is `speed` m/s.
    pub fn with_speed(mut self, speed: f64) -> Self {
        self.rate = 1.0;
        let s = self.cruise_speed();
        self.rate = if s > 0.0 { speed / s } else { 0.0 };
        self
    }

    pub fn kinematics(&self, t: Timestamp) -> Kinematics {
        let [phi, dphi, ddphi] = self.warp(t);
        let [mut p, mut d1, mut d2] = self.path.eval(phi);
        let [hz, hz1, hz2] = self.height.eval(phi);
        p.z += hz;
        d1.z += hz1;
        d2.z += hz2;

        let (yaw, yaw1) = match self.heading {
            Heading::Fixed(y) => (y, 0.0),
            Heading::Tangent => {
                let [_, t1, t2] = self.path.eval(phi);
                let n = t1.x * t1.x + t1.y * t1.y;
                if n > 0.0 {
                    (t1.y.atan2(t1.x), (t1.x * t2.y - t1.y * t2.x) / n)
                } else {
                    (0.0, 0.0)
                }
            }
        };
        let [roll, roll1, _] = self.roll.eval(phi);
        let [pitch, pitch1, _] = self.pitch.eval(phi);
        let (yr, pr, rr) = (yaw1 * dphi, pitch1 * dphi, roll1 * dphi);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        Kinematics {
            position: p,
            velocity: d1 * dphi,
            acceleration: d2 * (dphi * dphi) + d1 * ddphi,
            rotation: zyx(yaw, pitch, roll),
            angular_velocity: Vec3::new(
                rr - yr * sp,
                pr * cr + yr * cp * sr,
                -pr * sr + yr * cp * cr,
            ),
        }
    }

    /// Parses and validates a TOML trajectory spec.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let t: AnalyticTrajectory = toml::from_str(text).map_err(|e| e.to_string())?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.rest, self.ramp, self.rate, self.start];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err("rest, ramp, rate and start must be finite".into());
        }
        if self.rest < 0.0 {
            return Err(format!("rest must be non-negative, got {}", self.rest));
        }
        if self.ramp <= 0.0 {
            return Err(format!("ramp must be positive, got {}", self.ramp));
        }
        Ok(())
    }

    /// World-from-body pose.
    pub fn pose(&self, t: Timestamp) -> RigidTransform {
        let k = self.kinematics(t);
        RigidTransform::new(k.rotation, k.position)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_log;
    use approx::assert_relative_eq;

    fn wavy() -> AnalyticTrajectory {
        AnalyticTrajectory {
            path: Path::Lissajous {
                center: [1.0, -2.0, 1.2],
                amplitude: [4.0, 2.5],
                frequency: [1.0, 2.0],
                phase: 0.4,
            },
            heading: Heading::Tangent,
            height: Wobble { amplitude: 0.2, cycles: 3.0, phase: 0.0 },
            roll: Wobble { amplitude: 0.05, cycles: 2.0, phase: 0.3 },
            pitch: Wobble { amplitude: 0.04, cycles: 5.0, phase: 1.0 },
            rest: 1.0,
            ramp: 2.0,
            rate: 0.25,
            start: 0.1,
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let tr = wavy();
        let h = 1e-5;
        for &t in &[0.5, 1.3, 2.0, 2.9, 3.5, 7.25, 15.0] {
            let k = tr.kinematics(t);
            let kp = tr.kinematics(t + h);
            let km = tr.kinematics(t - h);
            let v = (kp.position - km.position) / (2.0 * h);
            let a = (kp.velocity - km.velocity) / (2.0 * h);
            assert_relative_eq!(k.velocity, v, epsilon = 1e-7);
            assert_relative_eq!(k.acceleration, a, epsilon = 1e-6);
            let w = rot_log(&(km.rotation.inverse() * kp.rotation)) / (2.0 * h);
            assert_relative_eq!(k.angular_velocity, w, epsilon = 1e-6);
        }
    }

    #[test]
    fn warp_is_continuous() {
        let tr = wavy();
        for &t in &[tr.rest, tr.rest + tr.ramp] {
            let a = tr.warp(t - 1e-9);
            let b = tr.warp(t + 1e-9);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6, "{t} {k}");
            }
        }
        assert_eq!(tr.warp(0.0)[1], 0.0);
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let rho = 5.0;
        let tr = AnalyticTrajectory {
            path: Path::Ellipse { center: [0.0; 3], semi_axes: [rho, rho] },
            heading: Heading::Tangent,
            height: Wobble::default(),
            roll: Wobble::default(),
            pitch: Wobble::default(),
            rest: 0.0,
            ramp: 1.0,
            rate: 0.3,
            start: 0.0,
        };
        let k = tr.kinematics(10.0);
        let v = k.velocity.norm();
        assert_relative_eq!(v, rho * 0.3, epsilon = 1e-12);
        assert_relative_eq!(k.acceleration.norm(), v * v / rho, epsilon = 1e-9);
        assert_relative_eq!(k.angular_velocity, Vec3::new(0.0, 0.0, 0.3), epsilon = 1e-12);
        assert_relative_eq!(tr.with_speed(2.0).cruise_speed(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn toml_spec() {
        let text = r#"
            heading = "tangent"
            rest = 1.0
            ramp = 2.0
            rate = 0.2
            path = { kind = "ellipse", center = [0.0, 0.0, 1.2], semi_axes = [2.5, 1.5] }
            height = { amplitude = 0.1, cycles = 3.0 }
        "#;
        let t = AnalyticTrajectory::from_toml(text).unwrap();
        assert_eq!(t.height.amplitude, 0.1);
        assert!(AnalyticTrajectory::from_toml(&text.replace("ramp = 2.0", "ramp = 0.0")).unwrap_err().contains("ramp"));
        let err = AnalyticTrajectory::from_toml(&format!("{text}\nspeed = 3")).unwrap_err();
        assert!(err.contains("speed"), "{err}");
    }
}

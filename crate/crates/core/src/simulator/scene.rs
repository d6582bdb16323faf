//! Analytic scene primitives and ray casting.

use serde::{Deserialize, Serialize};

use crate::geometry::{rot_exp, RigidTransform, Vec3};

use super::noise::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box centred at the local origin.
    Box { half_extents: [f64; 3] },
    /// Infinite plane through the local origin with local normal +z.
    Plane,
    Sphere { radius: f64 },
    /// Capped cylinder along local z, centred at the origin.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// World from local.
    pub pose: RigidTransform,
    bound: Option<f64>,
}

impl Primitive {
    pub fn new(shape: Shape, pose: RigidTransform) -> Self {
        let bound = match shape {
            Shape::Box { half_extents: h } => Some(Vec3::from(h).norm()),
            Shape::Plane => None,
            Shape::Sphere { radius } => Some(radius),
            Shape::Cylinder { radius, half_height } => Some(radius.hypot(half_height)),
        };
        Self { shape, pose, bound }
    }

    pub fn at(shape: Shape, center: Vec3) -> Self {
        Self::new(shape, RigidTransform::from_translation(center))
    }

    /// Smallest positive hit distance along a unit world ray.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if let Some(b) = self.bound {
            // bounding-sphere rejection
            let oc = origin - self.pose.translation;
            let along = oc.dot(dir);
            let perp = oc.norm_squared() - along * along;
            if perp > b * b || (along > 0.0 && oc.norm_squared() > b * b) {
                return None;
            }
        }
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.transform_vector(dir);
        match self.shape {
            Shape::Box { half_extents } => ray_box(&o, &d, &Vec3::from(half_extents)),
            Shape::Plane => ray_plane(&o, &d),
            Shape::Sphere { radius } => ray_sphere(&o, &d, radius),
            Shape::Cylinder { radius, half_height } => ray_cylinder(&o, &d, radius, half_height),
        }
    }
}

fn smallest_positive(a: f64, b: f64) -> Option<f64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if lo > 0.0 {
        Some(lo)
    } else if hi > 0.0 {
        Some(hi)
    } else {
        None
    }
}

/// Slab test; from inside the box the far face is hit.
pub fn ray_box(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - o[k]) / d[k];
        let b = (h[k] - o[k]) / d[k];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    if t_near > t_far {
        return None;
    }
    smallest_positive(t_near, t_far)
}

pub fn ray_plane(o: &Vec3, d: &Vec3) -> Option<f64> {
    if d.z.abs() < 1e-300 {
        return None;
    }
    let t = -o.z / d.z;
    (t > 0.0).then_some(t)
}

pub fn ray_sphere(o: &Vec3, d: &Vec3, radius: f64) -> Option<f64> {
    let b = o.dot(d);
    let c = o.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    smallest_positive(-b - s, -b + s)
}

pub fn ray_cylinder(o: &Vec3, d: &Vec3, radius: f64, half_height: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-300 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                if (o.z + t * d.z).abs() <= half_height {
                    consider(t);
                }
            }
        }
    }
    if d.z.abs() > 1e-300 {
        for cap in [-half_height, half_height] {
            let t = (cap - o.z) / d.z;
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x * x + y * y <= radius * radius {
                consider(t);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    pub fn push(&mut self, p: Primitive) {
        self.primitives.push(p);
    }

    /// Nearest hit over all primitives.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }

    /// Closed room with floor, ceiling and four walls, interior spanning
    /// `[-sx/2, sx/2] × [-sy/2, sy/2] × [0, sz]`, plus some furniture.
    pub fn box_room(size: Vec3) -> Scene {
        let t = 0.2;
        let (hx, hy, hz) = (size.x / 2.0, size.y / 2.0, size.z / 2.0);
        let slab = |c: Vec3, h: Vec3| Primitive::at(Shape::Box { half_extents: h.into() }, c);
        let mut s = Scene::default();
        s.push(slab(Vec3::new(0.0, 0.0, -t / 2.0), Vec3::new(hx + t, hy + t, t / 2.0)));
        s.push(slab(Vec3::new(0.0, 0.0, size.z + t / 2.0), Vec3::new(hx + t, hy + t, t / 2.0)));
        s.push(slab(Vec3::new(hx + t / 2.0, 0.0, hz), Vec3::new(t / 2.0, hy + t, hz)));
        s.push(slab(Vec3::new(-hx - t / 2.0, 0.0, hz), Vec3::new(t / 2.0, hy + t, hz)));
        s.push(slab(Vec3::new(0.0, hy + t / 2.0, hz), Vec3::new(hx + t, t / 2.0, hz)));
        s.push(slab(Vec3::new(0.0, -hy - t / 2.0, hz), Vec3::new(hx + t, t / 2.0, hz)));
        // furniture near the walls breaks symmetry
        s.push(slab(Vec3::new(hx - 0.6, hy - 1.0, 0.5), Vec3::new(0.4, 0.8, 0.5)));
        s.push(slab(Vec3::new(-hx + 1.0, -hy + 0.5, 0.4), Vec3::new(0.7, 0.3, 0.4)));
        s.push(Primitive::new(
            Shape::Box { half_extents: [0.5, 0.3, 0.9] },
            RigidTransform::new(rot_exp(&Vec3::new(0.0, 0.0, 0.5)), Vec3::new(-hx + 0.8, hy - 0.9, 0.9)),
        ));
        s.push(Primitive::at(
            Shape::Cylinder { radius: 0.15, half_height: hz },
            Vec3::new(hx - 1.2, -hy + 1.2, hz),
        ));
        s
    }

    /// Straight corridor along x with pillars protruding from alternating
    /// side walls every 5 m.
    pub fn corridor(length: f64, width: f64, height: f64) -> Scene {
        let t = 0.2;
        let (hl, hw, hh) = (length / 2.0, width / 2.0, height / 2.0);
        let slab = |c: Vec3, h: Vec3| Primitive::at(Shape::Box { half_extents: h.into() }, c);
        let mut s = Scene::default();
        s.push(slab(Vec3::new(0.0, 0.0, -t / 2.0), Vec3::new(hl + t, hw + t, t / 2.0)));
        s.push(slab(Vec3::new(0.0, 0.0, height + t / 2.0), Vec3::new(hl + t, hw + t, t / 2.0)));
        s.push(slab(Vec3::new(hl + t / 2.0, 0.0, hh), Vec3::new(t / 2.0, hw + t, hh)));
        s.push(slab(Vec3::new(-hl - t / 2.0, 0.0, hh), Vec3::new(t / 2.0, hw + t, hh)));
        s.push(slab(Vec3::new(0.0, hw + t / 2.0, hh), Vec3::new(hl + t, t / 2.0, hh)));
        s.push(slab(Vec3::new(0.0, -hw - t / 2.0, hh), Vec3::new(hl + t, t / 2.0, hh)));
        let mut x = -hl + 2.5;
        let mut k = 0;
        while x < hl - 1.0 {
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            let depth = 0.25 + 0.1 * (k % 3) as f64;
            s.push(slab(
                Vec3::new(x, side * (hw - depth / 2.0), hh),
                Vec3::new(0.2, depth / 2.0, hh),
            ));
            x += 5.0;
            k += 1;
        }
        s
    }

    /// Ground plane with distant buildings and columns between 30 and 60 m.
    pub fn open_field(seed: u64) -> Scene {
        let rng = CounterRng::new(seed);
        let mut s = Scene::default();
        s.push(Primitive::at(Shape::Plane, Vec3::zeros()));
        for i in 0..14u64 {
            let az = std::f64::consts::TAU * (i as f64 + 0.3 * rng.uniform(10, i)) / 14.0;
            let range = 30.0 + 30.0 * rng.uniform(11, i);
            let c = Vec3::new(range * az.cos(), range * az.sin(), 0.0);
            let h = [
                2.0 + 6.0 * rng.uniform(12, i),
                2.0 + 6.0 * rng.uniform(13, i),
                3.0 + 8.0 * rng.uniform(14, i),
            ];
            s.push(Primitive::new(
                Shape::Box { half_extents: h },
                RigidTransform::new(rot_exp(&Vec3::new(0.0, 0.0, az + rng.uniform(15, i))), c + Vec3::new(0.0, 0.0, h[2])),
            ));
        }
        for i in 0..10u64 {
            let az = std::f64::consts::TAU * rng.uniform(20, i);
            let range = 32.0 + 26.0 * rng.uniform(21, i);
            let hh = 4.0 + 4.0 * rng.uniform(22, i);
            s.push(Primitive::at(
                Shape::Cylinder { radius: 0.5 + rng.uniform(23, i), half_height: hh },
                Vec3::new(range * az.cos(), range * az.sin(), hh),
            ));
        }
        s
    }

    /// Clusters of small random spheres without a ground plane, so foliage
    /// dominates every scan.
    pub fn vegetation(seed: u64, extent: f64, clusters: usize) -> Scene {
        let rng = CounterRng::new(seed);
        let mut s = Scene::default();
        for c in 0..clusters as u64 {
            let center = Vec3::new(
                (rng.uniform(30, c) - 0.5) * extent,
                (rng.uniform(31, c) - 0.5) * extent,
                1.0 + 2.0 * rng.uniform(32, c),
            );
            for k in 0..48u64 {
                let id = c * 64 + k;
                let offset = Vec3::new(
                    rng.uniform(33, id) - 0.5,
                    rng.uniform(34, id) - 0.5,
                    rng.uniform(35, id) - 0.5,
                ) * 3.0;
                let r = 0.05 + 0.15 * rng.uniform(36, id);
                s.push(Primitive::at(Shape::Sphere { radius: r }, center + offset));
            }
        }
        s
    }

    /// Large courtyard loop: long walls, scattered blocks and pillars, for
    /// loop sequences that revisit their start.
    pub fn courtyard(size: f64, seed: u64) -> Scene {
        let rng = CounterRng::new(seed);
        let h = size / 2.0;
        let t = 0.3;
        let mut s = Scene::default();
        s.push(Primitive::at(Shape::Plane, Vec3::zeros()));
        let wall = |c: Vec3, e: Vec3| Primitive::at(Shape::Box { half_extents: e.into() }, c);
        s.push(wall(Vec3::new(h, 0.0, 3.0), Vec3::new(t, h, 3.0)));
        s.push(wall(Vec3::new(-h, 0.0, 3.0), Vec3::new(t, h, 3.0)));
        s.push(wall(Vec3::new(0.0, h, 3.0), Vec3::new(h, t, 3.0)));
        s.push(wall(Vec3::new(0.0, -h, 3.0), Vec3::new(h, t, 3.0)));
        for i in 0..24u64 {
            let c = Vec3::new(
                (rng.uniform(40, i) - 0.5) * (size - 4.0),
                (rng.uniform(41, i) - 0.5) * (size - 4.0),
                0.0,
            );
            let e = [0.3 + 1.2 * rng.uniform(42, i), 0.3 + 1.2 * rng.uniform(43, i), 0.5 + 2.0 * rng.uniform(44, i)];
            s.push(Primitive::new(
                Shape::Box { half_extents: e },
                RigidTransform::new(rot_exp(&Vec3::new(0.0, 0.0, 3.0 * rng.uniform(45, i))), c + Vec3::new(0.0, 0.0, e[2])),
            ));
        }
        s
    }

    /// Street loop around a central block of tall buildings, lined on the
    /// outside by further buildings, so only the local street is visible.
    /// The street centreline is the ellipse with semi-axes `(26, 18)`.
    pub fn campus(seed: u64) -> Scene {
        let rng = CounterRng::new(seed);
        let mut s = Scene::default();
        s.push(Primitive::at(Shape::Plane, Vec3::zeros()));
        let block = |s: &mut Scene, c: Vec3, e: [f64; 3], yaw: f64| {
            s.push(Primitive::new(
                Shape::Box { half_extents: e },
                RigidTransform::new(rot_exp(&Vec3::new(0.0, 0.0, yaw)), c + Vec3::new(0.0, 0.0, e[2])),
            ));
        };
        // inner ring of towers just inside the street
        let n_inner = 10u64;
        for i in 0..n_inner {
            let a = std::f64::consts::TAU * (i as f64 + 0.5) / n_inner as f64;
            let (ca, sa) = (a.cos(), a.sin());
            let c = Vec3::new(19.0 * ca, 11.5 * sa, 0.0);
            let h = 8.0 + 8.0 * rng.uniform(50, i);
            block(&mut s, c, [3.5, 3.0, h], a + 0.3 * (rng.uniform(51, i) - 0.5));
        }
        // outer frontage
        let n_outer = 16u64;
        for i in 0..n_outer {
            let a = std::f64::consts::TAU * (i as f64 + 0.3 * rng.uniform(52, i)) / n_outer as f64;
            let (ca, sa) = (a.cos(), a.sin());
            let c = Vec3::new(34.0 * ca, 25.5 * sa, 0.0);
            let h = 6.0 + 10.0 * rng.uniform(53, i);
            block(&mut s, c, [4.0 + 2.0 * rng.uniform(54, i), 3.0, h], a + std::f64::consts::FRAC_PI_2);
        }
        // street furniture
        for i in 0..24u64 {
            let a = std::f64::consts::TAU * (i as f64 + rng.uniform(55, i)) / 24.0;
            let side = if i % 2 == 0 { 1.12 } else { 0.88 };
            let c = Vec3::new(26.0 * side * a.cos(), 18.0 * side * a.sin(), 0.0);
            let hh = 1.0 + 1.5 * rng.uniform(56, i);
            s.push(Primitive::at(Shape::Cylinder { radius: 0.2, half_height: hh }, c + Vec3::new(0.0, 0.0, hh)));
        }
        s
    }

    /// Axis-aligned hull of the bounding spheres of all bounded primitives.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            if let Some(b) = p.bound {
                lo = lo.inf(&(p.pose.translation - Vec3::repeat(b)));
                hi = hi.sup(&(p.pose.translation + Vec3::repeat(b)));
            }
        }
        lo.x.is_finite().then_some((lo, hi))
    }

    /// Diameter of [`Scene::bounds`], 0 for unbounded scenes.
    pub fn diameter(&self) -> f64 {
        self.bounds().map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }
}

/// Built-in scenes selectable from a spec file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenePreset {
    BoxRoom { size: [f64; 3] },
    Corridor { length: f64, width: f64, height: f64 },
    OpenField { seed: u64 },
    Vegetation { seed: u64, extent: f64, clusters: usize },
    Courtyard { size: f64, seed: u64 },
    Campus { seed: u64 },
}

impl ScenePreset {
    pub fn build(&self) -> Scene {
        match *self {
            ScenePreset::BoxRoom { size } => Scene::box_room(Vec3::from(size)),
            ScenePreset::Corridor { length, width, height } => Scene::corridor(length, width, height),
            ScenePreset::OpenField { seed } => Scene::open_field(seed),
            ScenePreset::Vegetation { seed, extent, clusters } => Scene::vegetation(seed, extent, clusters),
            ScenePreset::Courtyard { size, seed } => Scene::courtyard(size, seed),
            ScenePreset::Campus { seed } => Scene::campus(seed),
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("preset: {name} must be positive, got {v}"))
            }
        };
        match *self {
            ScenePreset::BoxRoom { size } => size.iter().try_for_each(|&v| ok("size", v)),
            ScenePreset::Corridor { length, width, height } => {
                ok("length", length)?;
                ok("width", width)?;
                ok("height", height)
            }
            ScenePreset::Vegetation { extent, clusters, .. } => {
                ok("extent", extent)?;
                ok("clusters", clusters as f64)
            }
            ScenePreset::Courtyard { size, .. } => ok("size", size),
            ScenePreset::OpenField { .. } | ScenePreset::Campus { .. } => Ok(()),
        }
    }
}

/// Serializable scene description: an optional preset plus extra
/// primitives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<ScenePreset>,
    #[serde(default)]
    pub primitive: Vec<PrimitiveSpec>,
}

/// One primitive: `center` in metres and an optional axis-angle `rotation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveSpec {
    Box {
        center: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
        half_extents: [f64; 3],
    },
    Plane {
        center: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Cylinder {
        center: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
        radius: f64,
        half_height: f64,
    },
}

impl PrimitiveSpec {
    pub fn build(&self) -> Primitive {
        let pose = |c: &[f64; 3], r: &[f64; 3]| RigidTransform::new(rot_exp(&Vec3::from(*r)), Vec3::from(*c));
        match self {
            PrimitiveSpec::Box { center, rotation, half_extents } => {
                Primitive::new(Shape::Box { half_extents: *half_extents }, pose(center, rotation))
            }
            PrimitiveSpec::Plane { center, rotation } => Primitive::new(Shape::Plane, pose(center, rotation)),
            PrimitiveSpec::Sphere { center, radius } => {
                Primitive::at(Shape::Sphere { radius: *radius }, Vec3::from(*center))
            }
            PrimitiveSpec::Cylinder { center, rotation, radius, half_height } => Primitive::new(
                Shape::Cylinder { radius: *radius, half_height: *half_height },
                pose(center, rotation),
            ),
        }
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        match self {
            PrimitiveSpec::Box { half_extents, .. } => {
                half_extents.iter().try_for_each(|&h| positive("half_extents", h))
            }
            PrimitiveSpec::Plane { .. } => Ok(()),
            PrimitiveSpec::Sphere { radius, .. } => positive("radius", *radius),
            PrimitiveSpec::Cylinder { radius, half_height, .. } => {
                positive("radius", *radius)?;
                positive("half_height", *half_height)
            }
        }
    }
}

impl SceneSpec {
    /// Checks every primitive, naming the first offending one.
    /// Parses and validates; errors carry the TOML line and field.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.preset.is_none() && self.primitive.is_empty() {
            return Err("scene has no primitives".into());
        }
        if let Some(p) = &self.preset {
            p.validate()?;
        }
        for (i, p) in self.primitive.iter().enumerate() {
            p.validate().map_err(|e| format!("primitive {i}: {e}"))?;
        }
        Ok(())
    }

    pub fn build(&self) -> Scene {
        let mut scene = self.preset.map(|p| p.build()).unwrap_or_default();
        scene.primitives.extend(self.primitive.iter().map(PrimitiveSpec::build));
        scene
    }
}

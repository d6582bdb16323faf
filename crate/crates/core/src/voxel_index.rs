//! Incremental spatial index with capped voxel insertion, radius search and
//! bounded nearest-neighbour queries.
//!
//! Occupancy is tracked on a voxel grid at the index resolution. Queries run
//! on two bucket grids (fine and coarse) that hold point identifiers in
//! insertion order, which makes every result order deterministic.

use rustc_hash::FxHashMap;

use crate::geometry::Vec3;

pub type PointId = u32;

type Key = [i64; 3];

fn key_of(p: &Vec3, cell: f64) -> Key {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

#[derive(Debug, Clone)]
struct BucketGrid {
    cell: f64,
    buckets: FxHashMap<Key, Vec<PointId>>,
}

impl BucketGrid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            buckets: FxHashMap::default(),
        }
    }

    fn insert(&mut self, p: &Vec3, id: PointId) {
        self.buckets.entry(key_of(p, self.cell)).or_default().push(id);
    }

    fn for_each_in_box(&self, lo: &Vec3, hi: &Vec3, mut f: impl FnMut(PointId)) {
        let a = key_of(lo, self.cell);
        let b = key_of(hi, self.cell);
        for x in a[0]..=b[0] {
            for y in a[1]..=b[1] {
                for z in a[2]..=b[2] {
                    if let Some(ids) = self.buckets.get(&[x, y, z]) {
                        ids.iter().for_each(|&id| f(id));
                    }
                }
            }
        }
    }
}

/// Point store with per-voxel occupant counts.
#[derive(Debug, Clone)]
pub struct VoxelIndex {
    resolution: f64,
    points: Vec<Vec3>,
    occupancy: FxHashMap<Key, u32>,
    fine: BucketGrid,
    coarse: BucketGrid,
}

impl VoxelIndex {
    pub fn new(resolution: f64) -> Self {
        assert!(resolution > 0.0, "voxel resolution must be positive");
        Self {
            resolution,
            points: Vec::new(),
            occupancy: FxHashMap::default(),
            fine: BucketGrid::new(2.0 * resolution),
            coarse: BucketGrid::new(8.0 * resolution),
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: PointId) -> Vec3 {
        self.points[id as usize]
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Number of stored points in the voxel containing `p`.
    pub fn voxel_occupancy(&self, p: &Vec3) -> u32 {
        self.occupancy
            .get(&key_of(p, self.resolution))
            .copied()
            .unwrap_or(0)
    }

    /// Inserts each point whose voxel currently holds fewer than `cap`
    /// points. Returns the identifiers of the accepted points in input order.
    pub fn insert_capped(&mut self, points: &[Vec3], cap: u32) -> Vec<PointId> {
        assert!(cap >= 1, "voxel cap must be at least 1");
        let mut added = Vec::new();
        for p in points {
            if !p.iter().all(|c| c.is_finite()) {
                continue;
            }
            let count = self.occupancy.entry(key_of(p, self.resolution)).or_insert(0);
            if *count >= cap {
                continue;
            }
            *count += 1;
            let id = self.points.len() as PointId;
            self.points.push(*p);
            self.fine.insert(p, id);
            self.coarse.insert(p, id);
            added.push(id);
        }
        added
    }

    /// All stored points with `‖q − p‖ ≤ r`, in insertion order.
    pub fn radius_neighbors(&self, q: &Vec3, r: f64) -> Vec<PointId> {
        let mut out = Vec::new();
        if self.points.is_empty() || !(r >= 0.0) {
            return out;
        }
        let grid = if r > 2.0 * self.fine.cell {
            &self.coarse
        } else {
            &self.fine
        };
        let span = Vec3::repeat(r);
        let r2 = r * r;
        grid.for_each_in_box(&(q - span), &(q + span), |id| {
            if (self.points[id as usize] - q).norm_squared() <= r2 {
                out.push(id);
            }
        });
        out.sort_unstable();
        out
    }

    /// Closest stored point within `r` of `q`, with its distance. Ties go to the
    /// lowest identifier.
    pub fn nearest_within(&self, q: &Vec3, r: f64) -> Option<(PointId, f64)> {
        if self.points.is_empty() || !(r >= 0.0) {
            return None;
        }
        let cell = self.fine.cell;
        let center = key_of(q, cell);
        let max_ring = (r / cell).ceil() as i64 + 1;
        let r2 = r * r;
        let mut best: Option<(PointId, f64)> = None;
        for k in 0..=max_ring {
            for dx in -k..=k {
                for dy in -k..=k {
                    for dz in -k..=k {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != k {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        let Some(ids) = self.fine.buckets.get(&key) else {
                            continue;
                        };
                        for &id in ids {
                            let d2 = (self.points[id as usize] - q).norm_squared();
                            if d2 > r2 {
                                continue;
                            }
                            best = match best {
                                Some((bid, bd)) if bd < d2 || (bd == d2 && bid < id) => {
                                    Some((bid, bd))
                                }
                                _ => Some((id, d2)),
                            };
                        }
                    }
                }
            }
            // anything in ring k + 1 or beyond is at least k cells away
            let bound = k as f64 * cell;
            if bound > r {
                break;
            }
            if let Some((_, bd)) = best {
                if bd < bound * bound {
                    break;
                }
            }
        }
        best.map(|(id, d2)| (id, d2.sqrt()))
    }
}
